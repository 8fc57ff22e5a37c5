"""Smoke test of the Python bindings.

Build and install first:

    pip install -e crates/py --no-build-isolation
    python python/smoke.py
"""

import math
import random
import tempfile

import cxhg


def encode_reference(x, shape, d, s):
    b, c, h, w = shape
    n, k = h * w, len(s)
    out = [0.0] * (b * k * c)
    for bi in range(b):
        for i in range(n):
            xi = [x[(bi * c + ch) * n + i] for ch in range(c)]
            logits = [-s[kk] * sum((xi[ch] - d[kk * c + ch]) ** 2 for ch in range(c)) for kk in range(k)]
            m = max(logits)
            z = sum(math.exp(l - m) for l in logits)
            for kk in range(k):
                wgt = math.exp(logits[kk] - m) / z
                for ch in range(c):
                    out[(bi * k + kk) * c + ch] += wgt * (xi[ch] - d[kk * c + ch])
    return out


def check_encode():
    rng = random.Random(3)
    shape = [2, 3, 2, 2]
    x = [rng.uniform(-1, 1) for _ in range(24)]
    d = [rng.uniform(-1, 1) for _ in range(4 * 3)]
    s = [rng.uniform(0.5, 2) for _ in range(4)]
    got = cxhg.encode(x, shape, d, s)
    want = encode_reference(x, shape, d, s)
    assert max(abs(a - b) for a, b in zip(got, want)) < 1e-9


def check_metrics():
    cm = cxhg.ConfusionMatrix(2)
    cm.update([0, 0, 0, 0], [0, 0, 1, 1])
    assert cm.pix_acc() == 0.5
    assert cm.mean_iou() == 0.25
    assert cm.class_iou() == [0.5, 0.0]
    assert cxhg.poly_lr(1e-4, 0.95, 1000, 0) == 1e-4
    assert cxhg.poly_lr(1e-4, 0.95, 1000, 1000) == 0.0


def check_model():
    cfg = cxhg.Config(num_modules=1, depth=2, widths=[4, 4], stem_width=4, codewords=2,
                      encoding_divisor=4, patch_size=16, input_channels=5, num_classes=6)
    model = cxhg.Model(cfg, seed=1)
    assert model.num_parameters() > 0
    assert "hg0.codebook.codewords" in model.parameter_names()

    with tempfile.TemporaryDirectory() as tmp:
        census = cxhg.write_synth_dataset(f"{tmp}/data", tiles=1, width=64, height=64, seed=2)
        assert sum(census) == 64 * 64
        log = model.train(f"{tmp}/data", epochs_phase1=1, epochs_phase2=1, batch_size=2, base_lr=1e-3)
        assert log.startswith("iter,epoch,phase,lr,loss_total,loss_ce,loss_se,val_pixacc,val_miou\n")

        image, labels = cxhg.synth_tile(16, 16, seed=4)
        pred = model.predict(image, [1, 5, 16, 16])
        assert pred.shape == [1, 6, 16, 16]
        assert len(pred.labels) == 256 and max(pred.labels) < 6
        assert len(pred.presence) == 2
        assert math.isfinite(model.loss(image, [1, 5, 16, 16], labels))

        model.save(f"{tmp}/m.ckpt")
        again = cxhg.Model.load(cfg, f"{tmp}/m.ckpt")
        assert again.predict(image, [1, 5, 16, 16]).fused_logits == pred.fused_logits

    try:
        cxhg.Config(depth=3)
    except ValueError:
        pass
    else:
        raise AssertionError("invalid config accepted")


def main():
    check_encode()
    check_metrics()
    check_model()
    ok, text = cxhg.run_verify("oracle")
    assert ok, text
    print("smoke ok")


if __name__ == "__main__":
    main()
