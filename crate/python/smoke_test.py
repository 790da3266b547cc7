"""Smoke test for the streamphy Python extension.

Loads the module from an installed package if present, otherwise from the
cargo build output (target/release or target/debug).
"""

import importlib.machinery
import importlib.util
import json
import math
import pathlib
import sys

ROOT = pathlib.Path(__file__).resolve().parents[1]


def load():
    try:
        import streamphy

        return streamphy
    except ImportError:
        pass
    for profile in ("release", "debug"):
        so = ROOT / "target" / profile / "libstreamphy_py.so"
        if so.exists():
            loader = importlib.machinery.ExtensionFileLoader("streamphy", str(so))
            spec = importlib.util.spec_from_file_location("streamphy", so, loader=loader)
            mod = importlib.util.module_from_spec(spec)
            loader.exec_module(mod)
            sys.modules["streamphy"] = mod
            return mod
    sys.exit("streamphy extension not found; run `cargo build -p streamphy-py` first")


def main():
    sp = load()

    a, b = sp.hippo_legs(2)
    assert a == [[-1.0, 0.0], [-math.sqrt(3.0), -2.0]], a
    assert b == [1.0, math.sqrt(3.0)], b
    abar, bbar = sp.discretize_bilinear([[-1.0]], [1.0], 1.0)
    assert abs(abar[0][0] - 1 / 3) < 1e-15 and abs(bbar[0] - 2 / 3) < 1e-15

    assert sp.vrmse([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0
    assert abs(sp.vrmse([1.0, 2.0, 4.0], [1.0, 2.0, 3.0]) - math.sqrt(0.5)) < 1e-15
    try:
        sp.vrmse([1.0, 1.0], [2.0, 2.0])
        raise AssertionError("constant truth accepted")
    except ValueError:
        pass

    gen = json.dumps({"grid": [8, 8], "frames": 4, "records": 3})
    records = sp.generate(gen, seed=5)
    assert len(records) == 3 and records[0].extents == [8, 8]
    rec = records[0]
    frames = rec.sample("uniform", 0.25, seed=1)
    assert [len(f) for f in frames] == [16] * 4

    model_cfg = {
        "embedding": {"ranks": [3, 3], "frequencies": 3, "hidden": 8, "hidden_layers": 1},
        "encoder": {"d_model": 8, "heads": 2, "latent": 4, "mlp_hidden": 8},
        "decoder": {"modulation": 6, "film_hidden": 8, "film_layers": 1, "readout_layers": 1},
        "state_order": 4,
    }
    train_cfg = {"model": model_cfg, "epochs": 3, "batch_size": 2, "lr": 0.005}
    streams = [(r.id, r.sample("uniform", 0.3, seed=r.id)) for r in records]
    model, losses = sp.train_model(json.dumps(train_cfg), streams)
    assert len(losses) == 3 and all(math.isfinite(l) for l in losses)

    proc = model.stream()
    coords = rec.grid_coords()
    for f in frames:
        proc.push(f)
        y = proc.reconstruct(coords)
        assert len(y) == 64 and all(math.isfinite(v) for v in y)
        assert proc.state_shape == [4, 4]
    assert proc.frames_seen == 4
    batch = model.reconstruct_stream(frames, coords)
    assert batch[-1] == y
    score = model.score(frames, rec)
    assert score >= 0.0
    print(f"ok: losses {[round(l, 4) for l in losses]}, vrmse {score:.4f}, params {model.num_parameters()}")


if __name__ == "__main__":
    main()
