"""Command-line entry point wiring the library into reproducible pipelines.

Every artifact-producing subcommand resolves its configuration, writes the
resolved snapshot (config.resolved.json) and a sha256 manifest
(hashes.json) next to its outputs, and refuses to share an output
directory with a concurrent run (lock file). Errors exit nonzero with a
machine-readable JSON object on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import episodes as ep_mod
from . import mixer, policy, probe as probe_mod, retarget
from .episodes import (EpisodeManifest, SourceAdapter, gen_fixture, ingest,
                       list_episode_dirs, read_episode, synchronize,
                       write_episode, compute_norm_stats)
from .policy import ModelConfig
from .retarget import JointState, load_binding

CONFIG_SCHEMA = {
    "data": {"sources": [{"id", "path", "factor", "size"}]},
    "mix": {"seed"},
    "model": {"c", "t_tokens", "horizon", "lam", "flow_steps", "flow_hidden",
              "disc_hidden", "mlp_ratio", "image_height", "image_width"},
    "train": {"steps", "batch", "lr", "grl_enabled", "seed", "phase"},
    "paths": {"out"},
}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def validate_config(doc: dict) -> dict:
    """Reject unknown keys anywhere in the document, naming the key path."""
    if not isinstance(doc, dict):
        raise ConfigError("$", "config must be a JSON object")
    for section, content in doc.items():
        if section not in CONFIG_SCHEMA:
            raise ConfigError(section, "unknown section")
        spec = CONFIG_SCHEMA[section]
        if isinstance(spec, set):
            if not isinstance(content, dict):
                raise ConfigError(section, "must be an object")
            for key in content:
                if key not in spec:
                    raise ConfigError(f"{section}.{key}", "unknown key")
        else:  # data section
            if not isinstance(content, dict):
                raise ConfigError(section, "must be an object")
            for key, val in content.items():
                if key != "sources":
                    raise ConfigError(f"{section}.{key}", "unknown key")
                if not isinstance(val, list):
                    raise ConfigError(f"{section}.sources", "must be a list")
                for i, entry in enumerate(val):
                    for k in entry:
                        if k not in spec["sources"][0]:
                            raise ConfigError(f"{section}.sources[{i}].{k}", "unknown key")
                    if "id" not in entry:
                        raise ConfigError(f"{section}.sources[{i}].id", "required")
    return doc


def model_config_from(doc: dict, grl_override: str | None = None) -> ModelConfig:
    kwargs = {}
    kwargs.update(doc.get("model", {}))
    kwargs.update(doc.get("train", {}))
    if grl_override is not None:
        kwargs["grl_enabled"] = grl_override == "on"
    try:
        return ModelConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError("model", str(exc)) from exc


def _load_config(path) -> dict:
    doc = json.loads(Path(path).read_text())
    return validate_config(doc)


def _resolved_snapshot(out_dir: Path, doc: dict):
    (out_dir / "config.resolved.json").write_text(
        json.dumps(doc, sort_keys=True, indent=1) + "\n"
    )


def _hash_manifest(out_dir: Path):
    # config.resolved.json is run metadata (it may embed absolute paths),
    # so it is excluded: the manifest hashes the data artifacts themselves
    skip = ("hashes.json", ".lock", "config.resolved.json")
    rows = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name not in skip:
            rows[str(p.relative_to(out_dir))] = hashlib.sha256(p.read_bytes()).hexdigest()
    (out_dir / "hashes.json").write_text(json.dumps(rows, sort_keys=True, indent=1) + "\n")


class _OutputLock:
    """One writer per output directory; enforced with an O_EXCL lock file."""

    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"output directory {self.path.parent} is locked by another run"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _load_sources(doc: dict) -> tuple[dict[str, list], dict[str, float]]:
    episodes_by_source = {}
    factors = {}
    for entry in doc.get("data", {}).get("sources", []):
        sid = entry["id"]
        factors[sid] = float(entry.get("factor", 1.0))
        if "path" in entry:
            dirs = list_episode_dirs(entry["path"])
            if not dirs:
                raise ConfigError(f"data.sources.{sid}.path", f"no episodes under {entry['path']}")
            episodes_by_source[sid] = [read_episode(p) for p in dirs]
    return episodes_by_source, factors


# ---------------------------------------------------------------------------
# subcommand implementations

def _cmd_fixtures_gen(args) -> int:
    out = Path(args.out)
    domains = args.domains.split(",")
    with _OutputLock(out):
        for domain in domains:
            gen_fixture(out, domain.strip(), args.episodes, args.seed,
                        frames_per_episode=args.frames, hz=args.hz,
                        with_images=not args.no_images)
        _resolved_snapshot(out, {
            "data": {"sources": [{"id": d, "path": str(out)} for d in domains]},
        })
        _hash_manifest(out)
    print(f"generated {args.episodes} episodes per domain under {out}")
    return 0


def _cmd_ingest(args) -> int:
    adapter_doc = json.loads(Path(args.adapter).read_text())
    binding = None
    if adapter_doc.get("kind") == "robot":
        binding = load_binding(Path(args.adapter).parent / adapter_doc["binding"])
    adapter = SourceAdapter(
        name=adapter_doc["name"], kind=adapter_doc["kind"],
        field_map=adapter_doc.get("field_map"), scale=adapter_doc.get("scale"),
        target_hz=adapter_doc.get("target_hz"), binding=binding,
    )
    out = Path(args.out)
    with _OutputLock(out):
        eps = ingest(adapter, args.raw)
        for i, ep in enumerate(eps):
            write_episode(out / f"{adapter.name}_{i:04d}", ep.manifest, ep.frames, ep.images)
        _resolved_snapshot(out, {"data": {"sources": [{"id": adapter.name, "path": str(out)}]}})
        _hash_manifest(out)
    print(f"ingested {len(eps)} episodes into {out}")
    return 0


def _cmd_retarget(args) -> int:
    binding = load_binding(args.binding)
    if args.direction == "to-unified":
        adapter = SourceAdapter(name=binding.name, kind="robot", binding=binding)
        eps = ingest(adapter, [args.input])
        out = Path(args.out)
        with _OutputLock(out):
            for i, ep in enumerate(eps):
                write_episode(out / f"{binding.name}_{i:04d}", ep.manifest, ep.frames, ep.images)
            _hash_manifest(out)
        print(f"wrote {len(eps)} unified episodes to {out}")
        return 0
    # from-unified: solve joints for every frame of an episode
    ep = read_episode(args.input)
    q_prev = JointState.mid_range(binding)
    rows = []
    n_fail = 0
    for fr in ep.frames:
        result = retarget.from_unified(binding, fr, q_prev)
        q_prev = result.joints
        n_fail += 0 if result.all_converged else 1
        rows.append({
            "t_ns": fr.t_ns,
            "l_arm": result.joints.l_arm.tolist(),
            "r_arm": result.joints.r_arm.tolist(),
            "l_hand": result.joints.l_hand.tolist(),
            "r_hand": result.joints.r_hand.tolist(),
            "converged": result.all_converged,
        })
    Path(args.out).write_text(json.dumps({"robot": binding.name, "frames": rows}))
    print(f"retargeted {len(rows)} frames ({n_fail} with residuals above tolerance)")
    return 0


def _cmd_sync(args) -> int:
    doc = json.loads(Path(args.capture).read_text())
    streams = {}
    for unified, raw in ep_mod.IDENTITY_FIELD_MAP.items():
        if raw not in doc["channels"]:
            continue
        ch = doc["channels"][raw]
        t = np.asarray(ch["t_ns"], dtype=np.int64)
        v = np.asarray(ch["values"], dtype=np.float64)
        if unified in ep_mod.FINGER_CHANNELS:
            v = v.reshape(t.size, 5, 3)
        elif unified in ep_mod.GRIP_CHANNELS:
            v = v.reshape(t.size)
        streams[unified] = (t, v)
    frames = synchronize(streams, args.hz, doc["embodiment"], doc["instruction"])
    out = Path(args.out)
    with _OutputLock(out):
        manifest = EpisodeManifest(
            source=doc.get("source", "sync"), embodiment=doc["embodiment"],
            instruction=doc["instruction"], frame_count=len(frames), frequency_hz=args.hz,
        )
        write_episode(out / "sync_0000", manifest, frames)
        _hash_manifest(out)
    print(f"synchronized {len(frames)} frames at {args.hz} Hz into {out}")
    return 0


def _cmd_mix_preview(args) -> int:
    doc = _load_config(args.config)
    entries = []
    for entry in doc.get("data", {}).get("sources", []):
        if "size" in entry:
            size = int(entry["size"])
        elif "path" in entry:
            size = sum(read_episode(p).manifest.frame_count for p in list_episode_dirs(entry["path"]))
        else:
            raise ConfigError(f"data.sources.{entry['id']}", "needs size or path")
        entries.append((entry["id"], size, float(entry.get("factor", 1.0))))
    spec = mixer.build_mix(entries, seed=doc.get("mix", {}).get("seed", 0))
    probs = ", ".join(f"{p:.2f}" for p in spec.probs)
    print(f"p=({probs})")
    for e, p in zip(spec.entries, spec.probs):
        print(f"  {e.source}: size={e.size} factor={e.factor} p={p!r}")
    return 0


def _cmd_stats(args) -> int:
    eps = [read_episode(p) for p in list_episode_dirs(args.data)]
    if not eps:
        raise ConfigError("data", f"no episodes under {args.data}")
    stats = compute_norm_stats(eps)
    Path(args.out).write_text(stats.to_json())
    print(f"wrote stats over {sum(e.manifest.frame_count for e in eps)} frames to {args.out}")
    return 0


def _cmd_train(args) -> int:
    doc = _load_config(args.config)
    if args.grl is not None:
        doc.setdefault("train", {})["grl_enabled"] = args.grl == "on"
    config = model_config_from(doc)
    out = Path(args.out or doc.get("paths", {}).get("out", "run"))
    episodes_by_source, factors = _load_sources(doc)
    if not episodes_by_source:
        raise ConfigError("data.sources", "at least one source with a path is required")
    with _OutputLock(out):
        result = policy.train(
            config, episodes_by_source, factors,
            metrics_path=out / "metrics.csv", params_path=out / "params.php0",
        )
        _resolved_snapshot(out, doc)
        _hash_manifest(out)
    last = result.metrics[-1] if result.metrics else {"loss_fm": float("nan")}
    print(f"trained {config.steps} steps (grl={'on' if config.grl_enabled else 'off'}); "
          f"final loss_fm={last['loss_fm']:.4f}; artifacts in {out}")
    return 0


def _run_config(run_dir: Path) -> ModelConfig:
    doc = validate_config(json.loads((run_dir / "config.resolved.json").read_text()))
    return model_config_from(doc)


def _cmd_sample(args) -> int:
    run = Path(args.run)
    config = _run_config(run)
    params = policy.load_params(run / "params.php0")
    ep = read_episode(args.episode)
    k = args.frame
    if not 0 <= k < len(ep.frames):
        raise ConfigError("frame", f"episode has {len(ep.frames)} frames")
    if ep.images is None:
        raise ConfigError("episode", "episode has no images")
    chunk = policy.infer_actions(
        params, config, ep.images[k], ep.frames[k].instruction,
        ep.frames[k].state_vector(), n_steps=args.steps, seed=args.seed,
    )
    Path(args.out).write_text(json.dumps({
        "frame": k, "t_ns": ep.frames[k].t_ns, "horizon": config.horizon,
        "actions": chunk.tolist(),
    }))
    print(f"wrote {chunk.shape[0]}-step action chunk to {args.out}")
    return 0


def _cmd_probe(args) -> int:
    run = Path(args.run)
    config = _run_config(run)
    params = policy.load_params(run / "params.php0")
    digest_before = probe_mod.params_digest(params)
    eps = [read_episode(p) for p in list_episode_dirs(args.data)]
    report = probe_mod.run_probe(params, config, eps, seed=args.seed)
    if probe_mod.params_digest(params) != digest_before:
        raise RuntimeError("policy parameters changed during probing")
    out = Path(args.out)
    with _OutputLock(out):
        (out / "probe_report.json").write_text(report.to_json() + "\n")
        report.write_probability_csv(out / "probabilities.csv")
        _hash_manifest(out)
    dev = float(np.mean(np.abs(report.probabilities - 0.5)))
    print(f"probe accuracy={report.accuracy:.4f} mean|p-0.5|={dev:.4f} "
          f"({report.labels.size} held-out samples); report in {out}")
    return 0


def _cmd_report(args) -> int:
    run = Path(args.run)
    print(f"run {run}:")
    cfg_path = run / "config.resolved.json"
    if cfg_path.exists():
        doc = json.loads(cfg_path.read_text())
        train_sec = doc.get("train", {})
        print(f"  config: steps={train_sec.get('steps')} grl={train_sec.get('grl_enabled')} "
              f"seed={train_sec.get('seed')}")
    metrics_path = run / "metrics.csv"
    if metrics_path.exists():
        lines = metrics_path.read_text().strip().splitlines()
        if len(lines) > 1:
            first = lines[1].split(",")
            last = lines[-1].split(",")
            print(f"  loss_fm: {float(first[1]):.4f} -> {float(last[1]):.4f} "
                  f"over {len(lines) - 1} steps")
    report_path = run / "probe_report.json"
    if report_path.exists():
        rep = json.loads(report_path.read_text())
        print(f"  probe: accuracy={rep['accuracy']:.4f} "
              f"mean|p-0.5|={rep['mean_abs_p_minus_half']:.4f}")
    hashes = run / "hashes.json"
    if hashes.exists():
        print(f"  artifacts: {len(json.loads(hashes.read_text()))} hashed files")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="egokin", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    fx = sub.add_parser("fixtures", help="synthetic fixture data")
    fxs = fx.add_subparsers(dest="fixtures_command", required=True)
    g = fxs.add_parser("gen", help="generate the two-domain reach fixture")
    g.add_argument("--out", required=True)
    g.add_argument("--episodes", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, default=24)
    g.add_argument("--hz", type=float, default=15.0)
    g.add_argument("--domains", default="human,robot")
    g.add_argument("--no-images", action="store_true")
    g.set_defaults(func=_cmd_fixtures_gen)

    ing = sub.add_parser("ingest", help="run a source adapter over raw captures")
    ing.add_argument("--adapter", required=True)
    ing.add_argument("--out", required=True)
    ing.add_argument("raw", nargs="+")
    ing.set_defaults(func=_cmd_ingest)

    rt = sub.add_parser("retarget", help="convert robot joints <-> unified space")
    rt.add_argument("direction", choices=["to-unified", "from-unified"])
    rt.add_argument("--binding", required=True)
    rt.add_argument("--input", required=True, help="robot capture JSON or episode dir")
    rt.add_argument("--out", required=True)
    rt.set_defaults(func=_cmd_retarget)

    sy = sub.add_parser("sync", help="timestamp-synchronize a raw capture")
    sy.add_argument("--capture", required=True)
    sy.add_argument("--hz", type=float, required=True)
    sy.add_argument("--out", required=True)
    sy.set_defaults(func=_cmd_sync)

    mx = sub.add_parser("mix-preview", help="print normalized sampling probabilities")
    mx.add_argument("--config", required=True)
    mx.set_defaults(func=_cmd_mix_preview)

    st = sub.add_parser("stats", help="compute normalization statistics")
    st.add_argument("--data", required=True)
    st.add_argument("--out", required=True)
    st.set_defaults(func=_cmd_stats)

    tr = sub.add_parser("train", help="train the policy")
    tr.add_argument("--config", required=True)
    tr.add_argument("--grl", choices=["on", "off"], default=None)
    tr.add_argument("--out", default=None)
    tr.set_defaults(func=_cmd_train)

    sa = sub.add_parser("sample", help="run flow inference on one frame")
    sa.add_argument("--run", required=True)
    sa.add_argument("--episode", required=True)
    sa.add_argument("--frame", type=int, default=0)
    sa.add_argument("--steps", type=int, default=None)
    sa.add_argument("--seed", type=int, default=0)
    sa.add_argument("--out", required=True)
    sa.set_defaults(func=_cmd_sample)

    pr = sub.add_parser("probe", help="embodiment linear-probing diagnostic")
    pr.add_argument("--run", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=_cmd_probe)

    rp = sub.add_parser("report", help="summarize a run directory")
    rp.add_argument("--run", required=True)
    rp.set_defaults(func=_cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surfaces as machine-readable JSON
        payload = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, ConfigError):
            payload["key"] = exc.key
        print(json.dumps(payload), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
