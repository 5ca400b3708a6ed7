import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from peftkit import checkpoint
from peftkit.cli import TABLE1_SETUPS, main

TINY = {"n_layers": 1, "d_model": 16, "n_heads": 4, "n_kv_heads": 2, "d_head": 4, "d_ff": 24,
        "vocab": 259, "max_positions": 512}


def _write(path, obj):
    path.write_text(json.dumps(obj), encoding="utf-8")
    return path


def _jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


@pytest.fixture
def work(tmp_path):
    rng = np.random.default_rng(0)
    words = "alpha beta gamma delta epsilon zeta eta theta".split()
    for name, n in [("books", 10), ("wiki", 12), ("journals", 12), ("social", 300)]:
        _jsonl(tmp_path / f"{name}.jsonl",
               [{"text": " ".join(rng.choice(words, size=12)), "id": f"{name}{i}"} for i in range(n)])
    _write(tmp_path / "prep.json", {
        "sources": [{"name": n, "path": f"{n}.jsonl", "weight": w, "keep_fraction": k}
                    for n, w, k in [("books", .09, 1), ("wiki", .17, 1), ("journals", .22, 1),
                                    ("social", .52, .2)]],
        "n_total": 100, "max_chunk_len": 48, "seed": 0})
    _write(tmp_path / "train.json", {
        "model": TINY, "init_seed": 0, "dataset": "data.jsonl",
        "adapter": {"method": "lora", "rank": 2, "targets": "attn_qv", "seed": 0,
                    "layer_mask": {"mode": "all", "k": 0}},
        "train": {"lr": 1e-3, "schedule": "linear", "batch_size": 2, "max_seq": 48,
                  "total_steps": 3, "seed": 0, "grad_clip_norm": None}})
    _jsonl(tmp_path / "eval.jsonl", [{"article": f"alpha beta {i}", "summary": "gamma delta"}
                                     for i in range(6)] + [{"article": "no summary"}])
    return tmp_path


def _run(*argv):
    return main([str(a) for a in argv])


def _outputs(d):
    """Every file under ``d`` with the wall-clock field dropped from manifests."""
    out = {}
    for p in sorted(d.rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            if p.name.endswith("manifest.json"):
                m = json.loads(data)
                assert isinstance(m.pop("wall_clock"), float)
                data = json.dumps(m, sort_keys=True).encode()
            out[str(p.relative_to(d))] = data
    return out


def test_usage_errors_exit_1(capsys):
    assert _run("frobnicate") == 1
    assert "usage" in capsys.readouterr().err
    assert _run("train", "--bogus") == 1
    assert _run("train") == 1
    assert _run("count-params", "--preset", "nope") == 1


def test_runtime_error_exit_2(work, capsys):
    assert _run("prepare-data", "--config", work / "missing.json", "--out", work / "x") == 2
    assert "FileNotFoundError" in capsys.readouterr().err


def test_count_params_ia3(work, capsys):
    _write(work / "ia3.json", {"method": "ia3", "layer_mask": {"mode": "all", "k": 0}, "seed": 0})
    assert _run("count-params", "--model", "paper-1b", "--adapter", work / "ia3.json") == 0
    out = capsys.readouterr().out
    assert "49,152" in out.splitlines()[-1]
    assert _run("count-params", "--adapter", work / "ia3.json", "--format", "json") == 0
    assert json.loads(capsys.readouterr().out)["trainable"]["total"] == 49_152


def test_count_params_base(capsys):
    assert _run("count-params", "--model", "paper-1b", "--format", "json") == 0
    assert json.loads(capsys.readouterr().out)["base"]["total"] == 1_498_482_688


def test_count_params_figure1_preset(work, capsys):
    assert _run("count-params", "--preset", "paper-figure1", "--format", "json",
                "--out", work / "fig1.json") == 0
    setups = json.loads(capsys.readouterr().out)["setups"]
    assert set(setups) == set(TABLE1_SETUPS) and len(setups) == 15
    assert setups["IA3"]["total"] == 49_152 and setups["Prefix"]["total"] == 34_664_448
    assert (work / "fig1.json.manifest.json").exists()
    assert _run("count-params", "--preset", "paper-figure1") == 0
    table = capsys.readouterr().out.splitlines()
    assert len(table) == 16 and table[1].startswith("LoRA-qv-1024")


def test_pipeline_and_byte_identical_reruns(work):
    snapshots = []
    for rerun in range(2):
        d = work / f"run{rerun}"
        d.mkdir()
        for f in work.glob("*.json*"):
            shutil.copy(f, d)
        assert _run("prepare-data", "--config", d / "prep.json", "--out", d / "data.jsonl") == 0
        report = json.loads((d / "data.jsonl.report.json").read_text())
        assert [report["per_source"][n]["chunks"] for n in ("books", "wiki", "journals", "social")] \
            == [9, 17, 22, 52]
        assert _run("train", "--config", d / "train.json", "--out", d / "adapter") == 0
        _write(d / "merge.json", {"model": TINY, "init_seed": 0, "adapter_checkpoint": "adapter/adapter.ckpt"})
        assert _run("merge", "--config", d / "merge.json", "--out", d / "merged.ckpt") == 0
        _write(d / "eval.json", {"base_checkpoint": "merged.ckpt", "dataset": "eval.jsonl",
                                 "k": 1, "max_new_tokens": 8})
        assert _run("eval", "--config", d / "eval.json", "--out", d / "eval_report.json") == 0
        _write(d / "gen.json", {"model": TINY, "init_seed": 0, "adapter_checkpoint": "adapter/adapter.ckpt",
                                "prompt": "alpha", "max_new_tokens": 6})
        assert _run("generate", "--config", d / "gen.json", "--out", d / "gen.txt") == 0
        snapshots.append(_outputs(d))
    a, b = snapshots
    assert set(a) == set(b)
    differing = [k for k in a if a[k] != b[k] and not k.endswith("manifest.json")]
    assert differing == []
    # manifests differ only through the run directory in recorded paths
    for k in a:
        if k.endswith("manifest.json"):
            assert a[k].replace(b"run0", b"run1") == b[k]
    rep = json.loads(a["eval_report.json"])
    assert rep["dropped"] == 1 and len(rep["per_example"]) == 6


def test_train_zero_steps_equals_init(work):
    assert _run("prepare-data", "--config", work / "prep.json", "--out", work / "data.jsonl") == 0
    conf = json.loads((work / "train.json").read_text())
    conf["train"]["total_steps"] = 0
    _write(work / "train0.json", conf)
    assert _run("train", "--config", work / "train0.json", "--out", work / "a0") == 0
    tensors, meta = checkpoint.load(work / "a0" / "adapter.ckpt")
    from peftkit.adapters import LoraConfig, attach_adapter
    from peftkit.model import ModelConfig, init_model
    fresh = attach_adapter(init_model(ModelConfig(**TINY)), LoraConfig(2, init_seed=0))
    assert set(tensors) == set(fresh.adapter.parameters())
    for k, p in fresh.adapter.parameters().items():
        np.testing.assert_array_equal(tensors[k], p.data)


def test_eval_k5_overflow_exit_2(work, capsys):
    _jsonl(work / "long.jsonl", [{"article": f"doc {i} " + "word " * 30, "summary": "s"}
                                 for i in range(8)])
    _write(work / "eval5.json", {"model": TINY, "dataset": "long.jsonl", "max_new_tokens": 8})
    assert _run("eval", "--config", work / "eval5.json", "--k", 5) == 2
    err = capsys.readouterr().err
    assert "ContextLengthError" in err and "5-shot" in err
    assert _run("eval", "--config", work / "eval5.json", "--k", 0) == 0


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "peftkit.cli", "count-params", "--preset", "paper-figure1"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "34,664,448" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "peftkit.cli", "nope"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage" in proc.stderr
