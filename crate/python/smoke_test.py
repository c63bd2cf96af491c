"""Smoke test for the pytrkseg extension module.

Build the module first (see README), then run:
    python python/smoke_test.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import pytrkseg  # noqa: E402


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL: {what}")
    print(f"ok: {what}")


def main():
    vocab = pytrkseg.Vocab.default_corpus()
    ids = vocab.encode("the red circle")
    check(vocab.decode(ids) == "the red circle", "vocab round trip")
    check(vocab.encode("<PAD> <EOS> <VIDEO> <TRK>") == [0, 1, 2, 3], "special token ids")
    try:
        vocab.encode("zebra")
        check(False, "out-of-vocabulary word rejected")
    except IOError:
        check(True, "out-of-vocabulary word rejected")

    sparse, dense = pytrkseg.sample_frames(100, 32, 4)
    check(len(sparse) == 32 and dense == [0, 8, 16, 24], "uniform frame sampling")
    check(pytrkseg.token_count("sparse_dense", 32, 4, 16, 16) == 32 + 4 * 256, "token-count law")

    a = [[1, 1, 0, 0]] * 4
    b = [[0, 1, 1, 0]] * 4
    check(abs(pytrkseg.iou(a, b) - 4 / 12) < 1e-12, "iou")
    g, c = pytrkseg.giou_ciou([([[1, 0, 0, 0]] * 4, [[1, 0, 0, 0]] * 4), (a, b)])
    check(abs(g - 2 / 3) < 1e-12 and abs(c - 0.5) < 1e-12, "gIoU vs cIoU")
    j, f, jf = pytrkseg.score_video([a, a], [a, a])
    check((j, f, jf) == (1.0, 1.0, 1.0), "video J/F")

    zeros = [[0.0] * 4] * 4
    half = [[float((r * 4 + k) % 2) for k in range(4)] for r in range(4)]
    check(abs(pytrkseg.bce_loss(zeros, half) - math.log(2)) < 1e-12, "bce at zero logits")
    check(abs(pytrkseg.dice_loss(zeros, half) - 0.5) < 1e-6, "dice at zero logits")

    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "train")
        check(pytrkseg.generate_dataset(data, 4, seed=3) == 4, "synthetic dataset")
        config = {"iterations": 3, "warmup_iters": 1, "model": {"lm": {"n_layers": 1}}}
        model, losses = pytrkseg.Model.train(json.dumps(config), os.path.join(data, "manifest.json"))
        check(len(losses) == 3 and all(math.isfinite(x) for x in losses), "training run")
        ckpt = os.path.join(tmp, "model.safetensors")
        model.save(ckpt)
        model = pytrkseg.Model.load(ckpt)
        masks, forced, provenance = model.segment(os.path.join(data, "frames", "v00000"), "the red circle")
        check(len(masks) == 8 and len(masks[0]) == 64 and len(masks[0][0]) == 64, "one mask per frame")
        check(provenance == ["model"] * 8 and isinstance(forced, bool), "provenance")
        masks, _, provenance = model.segment(os.path.join(data, "frames", "v00000"), "the red circle", post_opt=True)
        check(provenance.count("reference") == 4, "post-optimization references")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
