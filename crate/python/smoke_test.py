"""Smoke test for the glcd Python extension.

Uses an installed `glcd` if there is one, otherwise loads the library built by
`cargo build -p glcd-python` from target/.

    cargo build --release -p glcd-python
    python3 python/smoke_test.py
"""

import importlib.machinery
import importlib.util
import math
import struct
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_glcd():
    try:
        import glcd

        return glcd
    except ImportError:
        pass
    names = ["libglcd.so", "libglcd.dylib", "glcd.dll"]
    for profile in ["release", "debug"]:
        for name in names:
            lib = ROOT / "target" / profile / name
            if lib.exists():
                loader = importlib.machinery.ExtensionFileLoader("glcd", str(lib))
                spec = importlib.util.spec_from_file_location("glcd", lib, loader=loader)
                module = importlib.util.module_from_spec(spec)
                loader.exec_module(module)
                sys.modules["glcd"] = module
                return module
    sys.exit("glcd extension not found; run `cargo build --release -p glcd-python` first")


def main():
    glcd = load_glcd()

    cfg = glcd.Config(
        """
        [video]
        frames = 12
        clip_len = 4
        channels = 3
        height = 4
        width = 4

        [schedule]
        steps = 5

        [denoiser]
        name = "toy_attention"
        """
    )
    defaults = glcd.Config().to_dict()
    assert defaults["glcd"]["gamma0"] == 0.005 and defaults["abam"]["lambda"] == 0.1
    try:
        glcd.Config("[glcd]\ngamma0 = 2.0\n")
        raise AssertionError("invalid gamma0 accepted")
    except ValueError as e:
        assert "gamma0" in str(e)

    pipeline = glcd.Pipeline(cfg)
    assert pipeline.shape == (12, 3, 4, 4)
    assert len(pipeline.global_maps()) == 3
    assert pipeline.global_maps()[0]["indices"] == [0, 3, 6, 9]
    assert len(pipeline.transitions()) == 5

    first = pipeline.run()
    second = pipeline.run()
    assert first.z0 == second.z0, "identical seeds must give identical latents"
    assert len(first.reports) == 5 and first.reports[0]["step"] == 0
    values = first.z0.to_list()
    assert len(values) == 12 * 3 * 4 * 4 and all(math.isfinite(v) for v in values)
    raw = first.z0.to_bytes()
    assert list(struct.unpack(f"<{len(values)}f", raw)) == values
    assert glcd.Latent.from_bytes(first.z0.shape, raw) == first.z0

    with tempfile.TemporaryDirectory() as tmp:
        written = first.write(tmp)
        assert any(str(p).endswith("z0.npy") for p in written)
        assert glcd.Latent.load(Path(tmp) / "z0.npy") == first.z0
        assert (Path(tmp) / "frames" / "frame_00011.ppm").exists()

    z = glcd.Latent.randn((8, 2, 4, 4), seed=1)
    eta = glcd.Latent.randn((8, 2, 4, 4), seed=2)
    assert glcd.frequency_fuse(z, eta, "all_pass") == z
    assert glcd.blend(z, eta, 1.0) == z
    assert abs(glcd.gamma_at(0) - 0.005) < 1e-15
    maps = glcd.local_maps(10, 4, 2, t=500, seed=3)
    covered = {i % 10 for m in maps for i in m["indices"]}
    assert covered == set(range(10))

    rows = first.z0.metrics()
    assert math.isnan(rows[-1]["flicker"]) and rows[0]["patch_consistency"] == 1.0
    assert first.z0.to_ppm()[0].startswith(b"P6\n4 4\n255\n")

    for name, passed, detail in glcd.run_checks("fusion"):
        assert passed, f"{name}: {detail}"

    print("glcd smoke test passed")


if __name__ == "__main__":
    main()
