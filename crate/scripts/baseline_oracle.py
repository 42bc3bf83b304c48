#!/usr/bin/env python3
"""Independent baseline numbers for a synthetic benchmark.

Reads the dataset and benchmark.json written by `ddsr synth` and recomputes,
with numpy only:

* the sha256 of the dataset file,
* each teacher's argmax accuracy on the target set,
* a Monte-Carlo estimate of the Bayes accuracy of the target mixture.

Usage: baseline_oracle.py BENCH_DIR [--draws N] [--seed S]
"""

import argparse
import hashlib
import json
import pathlib

import numpy as np


def load_dataset(path):
    lines = path.read_text().splitlines()
    header = dict(kv.split("=") for kv in lines[0].split(","))
    d, n = int(header["d"]), int(header["n"])
    labeled = header.get("labeled", "false") == "true"
    rows = [line.split(",") for line in lines[2:] if line.strip()]
    assert len(rows) == n
    x = np.array([[float(v) for v in r[1 : 1 + d]] for r in rows])
    y = np.array([int(r[1 + d]) for r in rows]) if labeled else None
    return x, y


def teacher_labels(t, x):
    mu = np.array(t["class_means"]).reshape(t["classes"], t["dim"])
    d2 = ((x[:, None, :] - mu[None, :, :]) ** 2).sum(axis=2)
    logits = -d2 / (2.0 * t["class_cov_scale"]) + np.array(t["label_bias"])
    # temperature and softmax do not move the argmax; np.argmax keeps the
    # lowest index on ties
    return logits.argmax(axis=1)


def bayes_accuracy(spec, dim, draws, seed):
    rng = np.random.default_rng(seed)
    w = np.array(spec["class_weights"])
    mu = np.array(spec["class_means"]).reshape(len(w), dim)
    s = spec["noise_scale"]
    y = rng.choice(len(w), size=draws, p=w)
    x = mu[y] + s * rng.standard_normal((draws, dim))
    d2 = ((x[:, None, :] - mu[None, :, :]) ** 2).sum(axis=2)
    score = np.log(w)[None, :] - d2 / (2.0 * s * s) if s > 0 else -d2
    return float((score.argmax(axis=1) == y).mean())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("bench_dir", type=pathlib.Path)
    ap.add_argument("--draws", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=20240)
    args = ap.parse_args()

    data_path = args.bench_dir / "target.csv"
    bench = json.loads((args.bench_dir / "benchmark.json").read_text())["benchmark"]
    x, y = load_dataset(data_path)
    out = {
        "dataset_sha256": hashlib.sha256(data_path.read_bytes()).hexdigest(),
        "teacher_b_accuracy": float((teacher_labels(bench["teacher_b"], x) == y).mean()),
        "teacher_c_accuracy": float((teacher_labels(bench["teacher_c"], x) == y).mean()),
        "bayes_accuracy": bayes_accuracy(bench["pair"]["target"], bench["pair"]["dim"], args.draws, args.seed),
        "bayes_draws": args.draws,
    }
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
