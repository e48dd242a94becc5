"""Smoke test for the recid Python module.

Build and install first:
    pip install --no-build-isolation ./crates/py
"""
import json
import pathlib
import tempfile

import recid

ROOT = pathlib.Path(__file__).resolve().parent.parent
FIXTURE = ROOT / "crates" / "core" / "fixtures" / "durecdial_synth"


def main():
    splits = recid.prepare(
        "durecdial",
        "derive-labels,first-positive",
        train=str(FIXTURE / "train.jsonl"),
        dev=str(FIXTURE / "dev.jsonl"),
        test=str(FIXTURE / "test.jsonl"),
    )
    expected = json.loads((FIXTURE / "expected.json").read_text())
    for name in ("train", "dev", "test"):
        assert len(splits[name]) == expected["splits"][name]["examples"], name
    stats = recid.corpus_stats("synth", splits["train"], splits["dev"], splits["test"])
    assert abs(stats["positive_ratio"] - expected["positive_ratio"]) < 1e-12
    print("prepare", {k: len(v) for k, v in splits.items()}, "ratio", stats["positive_ratio"])

    backbone = recid.Backbone("tiny:7")
    templates = recid.Templates()
    assert "sentinel-en" in templates.ids()
    rendered = templates.render("durecdial-t1-en", splits["dev"][0], backbone, 64)
    assert len(rendered["token_ids"]) <= 64
    assert 0 <= rendered["mask_position"] < len(rendered["token_ids"])

    data = recid.sentinel_splits(60, 20, 20, 0)
    model = recid.Model.train(
        "SOFT_PREFIX",
        backbone,
        data["train"],
        data["dev"],
        template="sentinel-en",
        config={"epochs": 10, "learning_rate": 0.03, "max_len": 64},
        prefix={"length": 4, "inject_layers": [0]},
    )
    preds = model.predict(data["test"])
    metrics = recid.compute_metrics([p["label"] for p in preds], [e.label for e in data["test"]])
    print("soft prefix test", {k: round(metrics[k], 4) for k in ("accuracy", "precision", "recall", "f1")})
    assert len(model.train_report["history"]) == 10

    with tempfile.TemporaryDirectory() as tmp:
        path = str(pathlib.Path(tmp) / "model.safetensors")
        model.save(path)
        again = recid.Model.load(path)
        assert again.kind == "SOFT_PREFIX"
        assert again.predict(data["test"]) == preds
        try:
            recid.Model.load(path, recid.Backbone("tiny:8"))
        except ValueError as e:
            assert "fingerprint" in str(e)
        else:
            raise AssertionError("mismatched backbone accepted")

        shots = recid.sample_few_shot(data["train"], 10, balanced=True, seed=3)
        assert sum(e.label for e in shots) == 5

        outcome = recid.run_experiment(
            f"""
name = "smoke"
method = "HARD_PROMPT"
backbone = "tiny:7"
template = "sentinel-en"
seeds = [0, 1]
output_dir = "{tmp}"
[corpus]
sentinel = {{ train = 24, dev = 8, test = 8 }}
[train]
epochs = 2
"""
        )
        assert len(outcome["results"]) == 2
        print("run_experiment test f1", outcome["aggregate"]["test"]["f1"])

    zs = recid.Model.zero_shot(backbone, "sentinel-en", max_len=64)
    p0, p1 = zs.score(data["test"][0])
    assert abs(p0 + p1 - 1.0) < 1e-12
    print("ok")


if __name__ == "__main__":
    main()
