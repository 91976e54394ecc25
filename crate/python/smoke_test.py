"""Smoke test for the pydynsplat extension.

Build and install first, e.g. `maturin develop --release -m crates/py/Cargo.toml`,
then run `python python/smoke_test.py`.
"""

import tempfile
from pathlib import Path

import pydynsplat as ds


def main():
    ok, err, n = ds.grad_check("renderer", seeds=1)
    assert ok and n > 0, (ok, err, n)
    print(f"grad-check renderer: max rel error {err:.2e} over {n} entries")

    img = [0.25] * (4 * 4 * 3)
    assert ds.psnr(img, img, 4, 4) == ds.PSNR_CAP
    assert abs(ds.ssim(img, img, 4, 4) - 1.0) < 1e-12

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        views = ds.synth("oscillator", str(tmp / "data"), seed=0, frames=8, resolution=24)
        data = ds.Dataset(str(tmp / "data"))
        assert len(data.views()) == views

        cfg = ds.TrainConfig("warmup_iters = 5\nmain_iters = 4\nnodes = 8\nwindow = 4\nnet_layers = 2\nnet_width = 8\nattn_layers = 1\nattn_heads = 2")
        cfg.set("seed", "3")
        try:
            cfg.set("no_such_key", "1")
            raise AssertionError("unknown key accepted")
        except ValueError:
            pass

        trainer = ds.Trainer(cfg, data)
        first = trainer.step(data)
        assert first["stage"] == "warmup"
        trainer.run(data)
        assert trainer.finished()
        assert trainer.main_done == 4

        report = trainer.evaluate(data, "view4")
        assert report["network_forwards"] == 2, report
        print(f"eval view4: psnr {report['psnr']:.2f} dB, tpsnr {report['tpsnr']:.2f} dB")

        ckpt = tmp / "ckpt"
        trainer.save(str(ckpt))
        again = ds.Trainer.load(str(ckpt))
        frames = again.render("view0", [0.0, 0.5, 1.0])
        assert len(frames) == 3 and len(frames[0]) == 24 * 24 * 3
        assert frames == trainer.render("view0", [0.0, 0.5, 1.0])

    print("smoke test passed")


if __name__ == "__main__":
    main()
