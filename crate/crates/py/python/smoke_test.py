"""Smoke test for the dansr_py extension.

Uses an installed `dansr_py` if importable, otherwise loads
target/release/libdansr_py.so (build it with
`cargo build --release -p dansr-py --features extension-module`).
"""

import importlib.util
import json
import math
import os
import sys
import tempfile


def load():
    try:
        import dansr_py

        return dansr_py
    except ImportError:
        pass
    root = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "..", ".."))
    lib = os.path.join(root, "target", "release", "libdansr_py.so")
    if not os.path.exists(lib):
        sys.exit(f"dansr_py not installed and {lib} not built")
    spec = importlib.util.spec_from_file_location("dansr_py", lib)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    d = load()

    k = d.KernelSpec.gaussian(2.0, 1.0, 0.3, size=11).synthesize()
    assert abs(k.sum() - 1.0) < 1e-9
    assert k.at(1, 2) == k.at(-1, -2)
    assert len(k.rows()) == 11
    assert abs(d.bessel_j1(1.0) - 0.4400505857) < 1e-9

    hr = d.Image.synthetic(48, 3)
    assert hr.shape == (3, 48, 48)
    lr = d.degrade_blurry(hr, k, 2)
    assert lr.shape == (3, 24, 24)
    assert math.isinf(d.psnr_y(lr, lr))
    assert abs(d.ssim_y(hr, hr) - 1.0) < 1e-12

    params = d.sample_degradation("real_x2", seed=5)
    theta = d.encode_theta(params)
    assert len(theta) == d.THETA_DIM
    decoded, repairs = d.decode_theta(theta, 2)
    assert repairs == []
    assert d.encode_theta(decoded) == theta
    real = d.degrade_image(hr, params, seed=1)
    assert real.shape == (3, 24, 24)

    with tempfile.TemporaryDirectory() as tmp:
        manifest = d.make_dataset("blurry_x2", 4, os.path.join(tmp, "data"), size=32, seed=1)
        cfg = json.loads(d.Model.init(scale=2).config())
        cfg.update(feature_channels=8, restorer_blocks=1, estimator_blocks=1, theta_feature_dim=8)
        model = d.Model.init(json.dumps(cfg), seed=2)
        train_cfg = {
            "lr0": 2e-4, "halve_every": 100, "total_steps": 3, "batch": 2, "lr_patch": 16,
            "theta_loss_weight": 1.0, "seed": 0, "augmentation": False, "val_every": 0,
            "adam_beta1": 0.9, "adam_beta2": 0.999, "adam_eps": 1e-8,
        }
        trained = d.train_model(model, manifest, json.dumps(train_cfg))
        assert trained.step == 3
        assert trained.weights_hash() != model.weights_hash()
        path = os.path.join(tmp, "m.danc")
        trained.save(path)
        again = d.Model.load(path)
        sr, th = again.infer(d.Image.synthetic(16, 4))
        sr2, th2 = trained.infer(d.Image.synthetic(16, 4))
        assert sr.shape == (3, 32, 32) and len(th) == d.THETA_DIM
        assert sr.data() == sr2.data() and th == th2
        report = json.loads(again.evaluate(manifest))
        assert len(report["rows"]) == 4

    checks = d.selfcheck()
    assert checks and all(ok for _, ok, _ in checks), [c for c in checks if not c[1]]

    try:
        d.KernelSpec.sinc(4.0)
    except ValueError:
        pass
    else:
        raise AssertionError("out-of-range omega_c accepted")

    print(f"smoke test ok ({len(checks)} self-checks)")


if __name__ == "__main__":
    main()
