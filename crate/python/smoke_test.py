#!/usr/bin/env python3
"""Smoke test for the revprag_py extension module.

Builds nothing itself: expects the cdylib to exist (cargo build -p revprag-py
--release). Copies it next to a temp dir under an importable name, runs a tiny
end-to-end pipeline, and exercises the main bound types.
"""

import json
import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_module():
    for profile in ("release", "debug"):
        so = REPO / "target" / profile / "librevprag_py.so"
        if so.exists():
            staging = Path(tempfile.mkdtemp(prefix="revprag_py_"))
            shutil.copy(so, staging / "revprag_py.so")
            sys.path.insert(0, str(staging))
            import revprag_py

            return revprag_py
    sys.exit("librevprag_py.so not found; run: cargo build --release -p revprag-py")


def main():
    rp = import_module()

    # corpus generation and retrieval
    corpus = rp.Corpus.generate(30, 0.5, 7)
    assert corpus.n_instances == 30
    assert corpus.n_documents == 30
    q = corpus.question(0)
    hits = corpus.top_k(q, 5)
    assert len(hits) == 5
    assert all(isinstance(i, int) and isinstance(s, float) for i, s in hits)

    # poisoning adds documents deterministically
    poisoned = corpus.poison(kind="poisonedrag", m=3, seed=7)
    assert poisoned.n_poisoned_documents == 15 * 3
    poisoned2 = corpus.poison(kind="poisonedrag", m=3, seed=7)
    assert poisoned2.n_poisoned_documents == poisoned.n_poisoned_documents

    # corpus JSONL round trip
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "corpus.jsonl"
        poisoned.save(path)
        back = rp.Corpus.ingest(path)
        assert back.n_instances == poisoned.n_instances
        assert back.n_poisoned_documents == poisoned.n_poisoned_documents

    # triplet loss unit cases
    assert rp.triplet_loss([0.0, 0.0], [0.0, 0.0], [2.0, 0.0], 1.0) == 0.0
    assert math.isclose(rp.triplet_loss([0.0], [1.0], [1.0], 0.5), 0.5)

    # tiny full run: manifest fields, artifacts, and checkpoint loading
    config = {
        "seed": 11,
        "corpus": {"n_facts": 24},
        "lm": {"n_layers": 1, "d_model": 16, "n_heads": 2, "epochs": 1, "batch": 8},
        "detector": {
            "e": 4,
            "epochs": 1,
            "batch": 8,
            "support_size": 10,
            "triplets_per_epoch": 16,
        },
    }
    with tempfile.TemporaryDirectory() as d:
        manifest = rp.full_run(d, config_json=json.dumps(config))
        assert len(manifest["stages"]) == 7
        assert "tpr" in manifest and "fpr" in manifest
        out = Path(d)

        lm = rp.LanguageModel.load(out / "lm.rvlm")
        answer, acts = lm.generate_with_activations("question : what ? answer :")
        assert lm.generate("question : what ? answer :") == answer
        assert len(acts) == config["lm"]["n_layers"] + 1
        assert len(acts[0]) == config["lm"]["d_model"]

        info = rp.dataset_info(out / "activations.actv")
        assert info["rows"] == config["lm"]["n_layers"] + 1
        assert info["cols"] == config["lm"]["d_model"]
        assert 0 < info["n_samples"] <= 24

        det = rp.Detector.load(out / "detector.rvpd")
        z = det.embed(acts)
        assert len(z) == config["detector"]["e"]
        label, support_id, dist = det.classify(out / "support.rvps", acts)
        assert label in ("correct", "poisoned")
        assert dist >= 0.0 and isinstance(support_id, int)

    print("smoke test passed")


if __name__ == "__main__":
    main()
