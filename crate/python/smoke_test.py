"""Smoke test for the Python extension module.

Build first with `cargo build -p phrasevae-py --release`, then run
`python3 python/smoke_test.py`. Set PHRASEVAE_LIB to the built shared
library to override the lookup under target/.
"""

import importlib.util
import math
import os
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module(tmp):
    candidates = [os.environ.get("PHRASEVAE_LIB")] if os.environ.get("PHRASEVAE_LIB") else []
    for profile in ("release", "debug"):
        for name in ("libphrasevae.so", "libphrasevae.dylib", "phrasevae.dll"):
            candidates.append(str(ROOT / "target" / profile / name))
    lib = next((c for c in candidates if c and os.path.exists(c)), None)
    if lib is None:
        sys.exit("extension not built; run `cargo build -p phrasevae-py --release`")
    suffix = ".pyd" if lib.endswith(".dll") else ".so"
    dst = pathlib.Path(tmp) / ("phrasevae" + suffix)
    shutil.copy(lib, dst)
    spec = importlib.util.spec_from_file_location("phrasevae", dst)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    with tempfile.TemporaryDirectory() as tmp:
        pv = load_module(tmp)

        notes = [(60, 0, 4), (62, 4, 2), (64, 8, 8)]
        tokens = pv.tokenize(notes, 32)
        assert len(tokens) == 32
        assert tokens[:5] == [60, pv.HOLD, pv.HOLD, pv.HOLD, 62]
        assert tokens[16:] == [pv.REST] * 16
        assert pv.detokenize(tokens) == notes
        assert pv.rhythm(tokens)[:6] == [0, 1, 1, 1, 0, 1]
        assert pv.transpose(tokens, 2)[0] == 62

        # One positive, one orthogonal negative, identity similarity.
        loss = pv.infonce([1.0, 0.0], [1.0, 0.0, 0.0, 1.0], [1.0, 0.0], [[0.0, 1.0]])
        assert abs(loss - math.log(1.0 + math.exp(-1.0))) < 1e-12

        mid = pv.slerp([1.0, 0.0], [0.0, 1.0], 0.5)
        assert abs(mid[0] - math.sqrt(0.5)) < 1e-6 and abs(mid[1] - math.sqrt(0.5)) < 1e-6

        try:
            pv.slerp([1.0, 0.0], [0.0, 1.0], 1.5)
        except ValueError:
            pass
        else:
            raise AssertionError("slerp accepted t outside [0, 1]")

        melodies = pv.synthetic_melodies(4, bars=8, seed=1)
        assert len(melodies) == 4 and all(len(m) == 128 for m in melodies)

        out = pathlib.Path(tmp) / "run"
        overrides = [
            "model.latent_dim=4",
            "model.hidden=16",
            "model.expander_hidden=8",
            "base.batch_size=4",
            "base.k=4",
            "base.max_epochs=1",
            "phases.finetune1.batch_size=4",
            "phases.finetune1.k=4",
            "phases.finetune2.batch_size=4",
            "phases.finetune2.k=4",
        ]
        ckpts = dict(pv.train(str(out), synthetic=12, overrides=overrides))
        assert set(ckpts) == {"pretrain2", "pretrain4", "pretrain8", "finetune1", "finetune2"}, ckpts

        model = pv.Model.load(ckpts["finetune2"])
        assert model.steps == 128
        phrase = melodies[0]
        z_p, z_r = model.encode(phrase)
        assert len(z_p) == 4 and len(z_r) == 4
        assert model.decode(z_p, z_r) == model.reconstruct(phrase)
        c, d = model.swap(phrase, melodies[1])
        assert len(c) == 128 and len(d) == 128
        assert model.swap(phrase, phrase)[0] == model.reconstruct(phrase)
        assert model.variations(phrase, 0.0, 2) == [model.reconstruct(phrase)] * 2
        steps = model.interpolate_rhythm(phrase, melodies[1], [0.0, 0.5, 1.0])
        assert len(steps) == 3

        midi = pathlib.Path(tmp) / "out.mid"
        pv.write_midi(c, str(midi))
        assert midi.stat().st_size > 0

    print("python smoke test passed")


if __name__ == "__main__":
    main()
