"""End-to-end smoke test of the `oapr` extension module.

    maturin develop -m crates/python/Cargo.toml --release   # or: pip install --no-build-isolation crates/python
    python python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import oapr


def main() -> None:
    pa = oapr.Catalog.builtin("PA-100K")
    assert len(pa) == 26, pa
    m1 = oapr.split(pa, seed=0)
    m2 = oapr.split(pa, seed=0)
    assert m1.to_json() == m2.to_json()
    assert not set(m1.base) & set(m1.novel)
    assert len(m1.base) + len(m1.novel) == 26

    assert oapr.p_at_k_label([[0]], [[True, False]], [[0, 1]], 1) == 0.5
    assert oapr.p_at_k_instance([[0]], [[True, False]], [[0, 1]], 1) == 0.0

    with tempfile.TemporaryDirectory() as tmp:
        d = Path(tmp)
        catalog = oapr.write_synthetic_dataset(d, n_train=32, n_test=16, seed=0)
        assert len(catalog) == 12
        manifest = oapr.split(catalog, seed=0, clusters=3)
        assert len(manifest.novel) == 3

        ck = oapr.train(catalog, manifest, d / "train.jsonl", seed=0, epochs=1, batch_size=16)
        ck.save(d / "ck.json")
        again = oapr.Checkpoint.load(d / "ck.json")
        assert again.fingerprint == ck.fingerprint

        index = oapr.build_index(ck, d / "test.jsonl")
        assert len(index) == 16
        index.save(d / "test.idx")
        assert oapr.Index.load(d / "test.idx").feature_checksum == index.feature_checksum

        hits = index.query(ck, ["pushing a stroller", catalog.phrases[0]], k=5)
        assert len(hits) == 5 and all(math.isfinite(s) for _, s, _ in hits)
        assert hits == index.query(ck, ["pushing a stroller", catalog.phrases[0]], k=5)
        try:
            index.query(ck, [" ".join(["word"] * 40)], k=1)
        except oapr.ContextOverflowError:
            pass
        else:
            raise AssertionError("overlong phrase accepted")

        report = oapr.evaluate(ck, index, seed=0)
        assert report["eval_mode"] == {"mode": "balanced", "seed": 0}
        assert set(report["splits"]) >= {"base", "novel"}

        lat = oapr.bench_latency(index, ck, n_queries=8)
        assert lat["queries"] == 8 and lat["mean_ms"] > 0

    print("python smoke test OK")


if __name__ == "__main__":
    main()
