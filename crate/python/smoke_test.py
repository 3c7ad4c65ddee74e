"""Smoke test for the `avalign` extension module.

Build and run from the repository root:

    cargo build --release -p avalign-py --features extension-module
    cp target/release/libavalign.so python/avalign.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import avalign  # noqa: E402


def main():
    feats = avalign.audio_features([0.01 * math.sin(0.05 * k) for k in range(22050)])
    assert len(feats) == 31 and len(feats[0]) == 240, (len(feats), len(feats[0]))

    assert avalign.normalize_au(5.0) == 1.0
    assert abs(avalign.cer("abd", "abc") - 1.0 / 3.0) < 1e-12

    uniform = [[0.25] * 4 for _ in range(3)]
    ffm, ent = avalign.collapse_diagnostic(uniform)
    assert abs(ent - math.log(4)) < 1e-9 and abs(ffm - 0.25) < 1e-12
    collapsed = [[1.0, 0.0, 0.0] for _ in range(5)]
    assert avalign.collapse_diagnostic(collapsed) == (1.0, 0.0)
    assert avalign.monotonicity_score(collapsed) == (None, True)

    train, test = avalign.synth_corpus(3, 1, seed=1, min_len=4, max_len=6)
    assert len(train) == 3 and len(test) == 1
    assert len(train[0].truth) == len(train[0].label)

    model = avalign.Model("av_align_au", seed=0)
    before = model.loss(train[0])["total"]
    for _ in range(20):
        model.train_step(train)
    after = model.loss(train[0])["total"]
    assert after < before, (before, after)

    out = model.decode(train[0], max_len=20)
    assert isinstance(out["text"], str)
    for row in out["alpha"]:
        assert abs(sum(row) - 1.0) < 1e-6
    rev = model.decode(train[0], max_len=20, edit="reverse")
    assert rev["text"] == out["text"]

    lags = avalign.modality_lag(out["alpha"])
    assert len(lags) == len(out["alpha"])

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ckpt")
        model.save(path)
        again = avalign.Model.load(path)
        assert again.kind == "av_align_au"
        assert again.loss(train[0])["total"] == after

    try:
        avalign.Model("nonsense")
    except ValueError:
        pass
    else:
        raise AssertionError("bad kind accepted")

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
