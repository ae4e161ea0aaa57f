"""
Training on clip pairs
======================

A batch is positive pairs (same identity, both cameras) plus negative pairs
(different identities).  Each clip contributes an identification term, each
pair a verification term, and each gated forward a regularizer term that
keeps the fused gate from collapsing.  Adam updates the mean pair gradient.
"""
import numpy as np

from gatereid.network import NetworkConfig
from gatereid.synth import generate_dataset
from gatereid.training import TrainConfig, train

net = NetworkConfig(height=32, width=16, conv1_out=4, conv1_of_out=4,
                    gate_hidden=6, state_dim=16, feature_dim=16,
                    conv2_out=6, conv3_out=8, kernel_size=3)
data = generate_dataset(num_identities=4, frame_count_range=(10, 14),
                        frame_hw=(32, 16), seed=3)
config = TrainConfig(epochs=15, pos_pairs_per_batch=4, neg_pairs_per_batch=4,
                     subseq_len=6, crop_height=28, crop_width=12, rng_seed=0)

result = train(data.clips, net, config)

print("epoch  total     ident_i   verif     gate_i    accuracy  mean_gate")
for r in result.records:
    if r.epoch % 3 == 0:
        print(f"{r.epoch:5d}  {r.total:8.4f}  {r.ident_i:8.4f}  {r.verif:8.4f}"
              f"  {r.gate_i:8.4f}  {r.id_accuracy:8.2f}  {r.mean_gate:9.4f}")

# determinism: the whole run is a function of (data, config); repeating it
# reproduces every parameter bit for bit
again = train(data.clips, net, config)
same = all((result.params[n].data == again.params[n].data).all()
           for n in result.params.names())
print("\nre-run bit-identical:", same)

# and stopping at an epoch boundary then resuming gives the same trajectory,
# because each epoch draws from its own counter-based random stream
from dataclasses import replace

half = train(data.clips, net, replace(config, epochs=8))
resumed = train(data.clips, net, config, stats=half.stats, resume=half)
same = all((result.params[n].data == resumed.params[n].data).all()
           for n in result.params.names())
print("8 + 7 epochs == 15 straight:", same)
