"""Synthetic-benchmark pipeline behind the pretraining and probe acceptance checks.

Run as a script it prints the results of one seed as JSON, with floats in
hex so two runs can be compared bit for bit.
"""

import json
import sys
import tempfile

import numpy as np

from skelpaint.autodiff_net import NetConfig, init_model
from skelpaint.evalbench import SyntheticSpec, generate_dataset, load_benchmark
from skelpaint.seeding import derive_seed
from skelpaint.training import ClassifierConfig, PretrainConfig, baseline_model, encoder_digest, linear_probe, pretrain_stream

T = 16
NET = NetConfig(k=6, widths=(16, 16, 32), feat_dim=64, grid_size=12, decoder_hidden=64)
EPOCHS = 50
BATCH = 8
# desk-scale learning rate; see README ("Desk-scale settings")
LR_MAX, LR_MIN = 1e-3, 1e-5


def run_pipeline(seed: int) -> dict:
    with tempfile.TemporaryDirectory() as tmp:
        manifest = generate_dataset(SyntheticSpec(n_classes=5, per_class=40, n_joints=8, n_frames=32, seed=seed), tmp)
        bm = load_benchmark(manifest, T, 0.25, seed)

    streams, losses = {}, {}
    for scheme in ("temporal", "spatial"):
        cfg = PretrainConfig(scheme=scheme, epochs=EPOCHS, batch_size=BATCH, lr_max=LR_MAX, lr_min=LR_MIN,
                             input_mode="hint", hint_ratio=0.5, seed=seed)
        res = pretrain_stream(bm.train_seqs, cfg, NET)
        streams[scheme], losses[scheme] = res.model, res.losses

    probe_cfg = ClassifierConfig(seed=seed)  # library defaults: Nesterov SGD 1e-3 -> 1e-5, 100 epochs, batch 32

    def probe(models):
        return linear_probe(models, bm.train_clouds, bm.train_labels, bm.test_clouds, bm.test_labels,
                            probe_cfg, bm.n_classes).accuracy

    digest = encoder_digest([streams["temporal"], streams["spatial"]])
    acc = {
        "TS": probe([streams["temporal"]]),
        "TS+SS": probe([streams["temporal"], streams["spatial"]]),
        "Baseline-U": probe([baseline_model(NET, seed)]),
        # diagnostic only: untrained encoder fed the same half-colored input
        "random-hint": probe([init_model(NET, derive_seed(seed, "init", "random-hint"), "temporal", "hint")]),
    }
    return {"seed": seed, "losses": losses, "accuracy": acc,
            "digest_unchanged": digest == encoder_digest([streams["temporal"], streams["spatial"]])}


def to_json(result: dict) -> str:
    def enc(v):
        if isinstance(v, float):
            return float(v).hex()
        if isinstance(v, dict):
            return {k: enc(x) for k, x in v.items()}
        if isinstance(v, list):
            return [enc(x) for x in v]
        return v

    return json.dumps(enc(result), sort_keys=True)


if __name__ == "__main__":
    print(to_json(run_pipeline(int(sys.argv[1]))))
