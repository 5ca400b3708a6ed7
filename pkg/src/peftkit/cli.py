"""Command-line entry point: ``peftkit <subcommand> --config cfg.json [--seed N] [--out PATH]``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .adapters import (
    BottleneckConfig, Ia3Config, LoraConfig, PrefixConfig, adapter_config_from_json,
    adapter_config_to_json, attach_adapter, count_trainable, merge_lora,
)
from .data import (
    CorpusSource, detokenize, mix_corpora, read_dataset, read_jsonl, tokenize, write_dataset,
)
from .evaluation import EvalConfig, PromptTemplate, generate_greedy, run_eval
from .model import count_base_params, init_model, resolve_model_config
from .train import TrainConfig, train_adapter

COMMANDS = ("prepare-data", "train", "merge", "count-params", "eval", "generate")

# The fifteen adapter setups compared in the method table, keyed by row label.
TABLE1_SETUPS = {
    **{f"LoRA-qv-{r}": LoraConfig(r, targets="attn_qv") for r in (1024, 256, 128, 32, 8)},
    **{f"LoRA-ff-{r}": LoraConfig(r, targets="ff_all") for r in (256, 128, 64, 32, 8)},
    "IA3": Ia3Config(),
    **{f"Bottleneck-{f}": BottleneckConfig(f) for f in (4, 16, 64)},
    "Prefix": PrefixConfig(30, 512),
}
COUNT_PRESETS = {"paper-figure1": TABLE1_SETUPS}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="peftkit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"peftkit {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path)
        s.add_argument("--seed", type=int)
        s.add_argument("--out", type=Path)
        s.add_argument("--preset")
        if name == "count-params":
            s.add_argument("--model", help="model preset name (default paper-1b)")
            s.add_argument("--adapter", type=Path, help="adapter JSON config")
            s.add_argument("--format", choices=("table", "json"), default="table")
        if name == "eval":
            s.add_argument("--k", type=int)
    return p


def _read_config(path: Path | None, required: bool = True) -> tuple[dict, Path]:
    if path is None:
        if required:
            raise UsageError("--config is required for this command")
        return {}, Path.cwd()
    return json.loads(path.read_text(encoding="utf-8")), path.resolve().parent


def _path(base: Path, p) -> Path | None:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else base / p


def _dtype(conf: dict):
    return np.float64 if conf.get("dtype", "float32") == "float64" else np.float32


def _load_model(conf: dict, base: Path):
    dtype = _dtype(conf)
    ckpt = _path(base, conf.get("base_checkpoint"))
    if ckpt is not None:
        model = checkpoint.load_model(ckpt, dtype)
    else:
        model = init_model(resolve_model_config(conf.get("model", "desk")), conf.get("init_seed", 0), dtype)
    adapter_ckpt = _path(base, conf.get("adapter_checkpoint"))
    if adapter_ckpt is not None:
        checkpoint.load_adapter(adapter_ckpt, model)
        if conf.get("merge"):
            model = merge_lora(model)
    return model


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest(path: Path, command: str, config: dict, inputs, outputs, seed, started: float) -> None:
    _write_json(path, {
        "command": command,
        "config": config,
        "inputs": [str(p) for p in inputs if p is not None],
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "tool_version": __version__,
        "wall_clock": round(time.perf_counter() - started, 3),
    })


def _need_out(args) -> Path:
    if args.out is None:
        raise UsageError(f"--out is required for {args.command}")
    return args.out


# subcommands -------------------------------------------------------------------


def cmd_prepare_data(args, started) -> int:
    conf, base = _read_config(args.config)
    out = _need_out(args)
    seed = args.seed if args.seed is not None else conf.get("seed", 0)
    sources = [CorpusSource(s["name"], str(_path(base, s["path"])), s.get("keep_fraction", 1.0),
                            s.get("weight", 1.0)) for s in conf["sources"]]
    result = mix_corpora(sources, conf["n_total"], conf.get("max_chunk_len", 1024), seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, result.chunks)
    report = out.with_name(out.name + ".report.json")
    _write_json(report, result.report)
    _manifest(out.with_name(out.name + ".manifest.json"), args.command, {**conf, "seed": seed},
              [args.config] + [s.path for s in sources], [out, report], seed, started)
    counts = ", ".join(f"{k}={v['chunks']}" for k, v in result.report["per_source"].items())
    print(f"wrote {result.report['total_chunks']} chunks ({counts}) to {out}")
    return 0


def cmd_train(args, started) -> int:
    conf, base = _read_config(args.config)
    out = _need_out(args)
    tconf = dict(conf["train"])
    if args.seed is not None:
        tconf["seed"] = args.seed
    tcfg = TrainConfig.from_json(tconf)
    model = _load_model({k: v for k, v in conf.items() if k != "adapter_checkpoint"}, base)
    attach_adapter(model, adapter_config_from_json(conf["adapter"]))
    dataset = read_dataset(_path(base, conf["dataset"]))
    report = train_adapter(model, dataset, tcfg, out)
    summary = {"losses": report.losses, "tokens_seen": report.tokens_seen,
               "trainable_params": model.num_trainable(),
               "adapter": adapter_config_to_json(model.adapter.cfg), "train": tcfg.to_json()}
    _write_json(out / "train_report.json", summary)
    _manifest(out / "manifest.json", args.command, {**conf, "train": tcfg.to_json()},
              [args.config, _path(base, conf["dataset"]), _path(base, conf.get("base_checkpoint"))],
              [out / "adapter.ckpt", out / "loss.csv", out / "train_report.json"], tcfg.seed, started)
    final = f"{report.losses[-1]:.4f}" if report.losses else "n/a"
    print(f"trained {tcfg.total_steps} steps, final loss {final}; adapter -> {out / 'adapter.ckpt'}")
    return 0


def cmd_merge(args, started) -> int:
    conf, base = _read_config(args.config)
    out = _need_out(args)
    if "adapter_checkpoint" not in conf:
        raise UsageError("merge config needs 'adapter_checkpoint'")
    model = _load_model({**conf, "merge": False}, base)
    merged = merge_lora(model)
    checkpoint.save_model(out, merged)
    _manifest(out.with_name(out.name + ".manifest.json"), args.command, conf,
              [args.config, _path(base, conf.get("base_checkpoint")),
               _path(base, conf["adapter_checkpoint"])], [out], conf.get("init_seed"), started)
    print(f"merged model -> {out}")
    return 0


def _fmt_table(rows: list[tuple[str, int]], header=("setup", "trainable")) -> str:
    w = max(len(header[0]), *(len(r[0]) for r in rows))
    lines = [f"{header[0]:<{w}}  {header[1]:>14}"]
    lines += [f"{name:<{w}}  {n:>14,}" for name, n in rows]
    return "\n".join(lines)


def cmd_count_params(args, started) -> int:
    conf, base = _read_config(args.config, required=False)
    mc = resolve_model_config(args.model or conf.get("model", "paper-1b"))
    if args.preset:
        if args.preset not in COUNT_PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; known: {sorted(COUNT_PRESETS)}")
        counts = {name: count_trainable(cfg, mc) for name, cfg in COUNT_PRESETS[args.preset].items()}
        result = {"model": mc.to_dict(), "setups": counts}
        text = _fmt_table([(k, v["total"]) for k, v in counts.items()])
    else:
        adapter = None
        if args.adapter is not None:
            adapter = json.loads(args.adapter.read_text(encoding="utf-8"))
        elif "adapter" in conf:
            adapter = conf["adapter"]
        if adapter is None:
            counts = count_base_params(mc)
            result = {"model": mc.to_dict(), "base": counts}
            text = _fmt_table([(k, v) for k, v in counts.items()], ("component", "params"))
        else:
            counts = count_trainable(adapter_config_from_json(adapter), mc)
            result = {"model": mc.to_dict(), "adapter": adapter, "trainable": counts}
            text = _fmt_table([(k, v) for k, v in counts.items()], ("component", "trainable"))
    rendered = json.dumps(result, indent=2, sort_keys=True) if args.format == "json" else text
    print(rendered)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(rendered + "\n", encoding="utf-8")
        _manifest(args.out.with_name(args.out.name + ".manifest.json"), args.command,
                  {**conf, "model": mc.to_dict(), "preset": args.preset,
                   "adapter_file": str(args.adapter) if args.adapter else None},
                  [args.config, args.adapter], [args.out], None, started)
    return 0


def cmd_eval(args, started) -> int:
    conf, base = _read_config(args.config)
    model = _load_model(conf, base)
    ec = {k: conf[k] for k in ("k", "max_new_tokens", "demo_selection_seed", "embedding_provider",
                               "truncate_articles") if k in conf}
    if "embedding_table" in conf:
        ec["embedding_table"] = str(_path(base, conf["embedding_table"]))
    if args.k is not None:
        ec["k"] = args.k
    if args.seed is not None:
        ec["demo_selection_seed"] = args.seed
    cfg = EvalConfig(**ec)
    template = PromptTemplate(**conf.get("template", {}))
    rows = read_jsonl(_path(base, conf["dataset"]))
    pool = read_jsonl(_path(base, conf["demo_pool"])) if conf.get("demo_pool") else None
    report = run_eval(model, rows, template, cfg, demo_pool=pool)
    m = report.means
    print(f"k={cfg.k}  examples={len(report.per_example)}  dropped={report.dropped}  "
          f"ROUGE-L F={m['rouge_l']['f1']:.4f}  embed F1={m['embed_f1']['f1']:.4f}")
    if args.out is not None:
        _write_json(args.out, report.to_json())
        _manifest(args.out.with_name(args.out.name + ".manifest.json"), args.command,
                  {**conf, **ec}, [args.config, _path(base, conf["dataset"])], [args.out],
                  cfg.demo_selection_seed, started)
    return 0


def cmd_generate(args, started) -> int:
    conf, base = _read_config(args.config)
    model = _load_model(conf, base)
    ids = tokenize(conf["prompt"])
    gen = generate_greedy(model, ids, int(conf.get("max_new_tokens", 64)))
    text = detokenize(gen).decode("utf-8", errors="replace")
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text, encoding="utf-8")
        _manifest(args.out.with_name(args.out.name + ".manifest.json"), args.command, conf,
                  [args.config], [args.out], conf.get("init_seed"), started)
    else:
        print(text)
    return 0


_HANDLERS = {"prepare-data": cmd_prepare_data, "train": cmd_train, "merge": cmd_merge,
             "count-params": cmd_count_params, "eval": cmd_eval, "generate": cmd_generate}


def main(argv=None) -> int:
    parser = build_parser()
    started = time.perf_counter()
    args = None
    try:
        args = parser.parse_args(argv)
        return _HANDLERS[args.command](args, started)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except Exception as e:
        print(f"peftkit {getattr(args, 'command', '')}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


dispatch = main

if __name__ == "__main__":
    sys.exit(main())
