"""Command-line orchestration: data generation, training, evaluation, inference.

Subcommands: gen-data, fit-tokenizer, train, eval, ablate, infer.  Exit codes:
0 success, 2 config error, 3 missing artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import __version__, evalkit, tokenizer, training, world
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, apply_overrides, config_hash, config_to_dict, load_config, save_config
from .errors import ConfigError, InputError, MissingArtifactError, NumericError
from .pipeline import ModelDims, ModelBundle, build_model, tokens_to_tensor
from .training import AblationFlags

RUN_ROOT_ENV = "STYLESEM_RUN_ROOT"


# ---------------------------------------------------------------------------
# Run directory plumbing
# ---------------------------------------------------------------------------

def resolve_run_dir(args) -> Path:
    root = Path(args.run_root or os.environ.get(RUN_ROOT_ENV, "runs"))
    return root / args.run


def prepare_run_dir(cfg: RunConfig, args) -> Path:
    """Create the run directory and pin the exact config; reject silent changes."""
    run_dir = resolve_run_dir(args)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg_path = run_dir / "config.yaml"
    if cfg_path.exists():
        existing = load_config(cfg_path)
        if config_hash(existing) != config_hash(cfg) and not args.force_config:
            raise ConfigError(
                f"{cfg_path} holds a different config; use --force-config to replace it"
            )
    save_config(cfg_path, cfg)
    (run_dir / "run.txt").write_text(
        f"tool_version={__version__}\nseed={cfg.seed}\nconfig_hash={config_hash(cfg)}\n"
    )
    return run_dir


def _write_meta(run_dir: Path, command: str, entries: dict[str, str]) -> None:
    lines = [f"{k}={v}" for k, v in sorted(entries.items())]
    (run_dir / f"meta_{command}.txt").write_text("\n".join(lines) + "\n")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{what} not found at {path}; run the prerequisite command first")
    return path


def _model_dims(cfg: RunConfig) -> ModelDims:
    return ModelDims(
        visual_vocab=cfg.tokenizer.vocab_size,
        d=cfg.model.d,
        n_blocks=cfg.model.n_blocks,
        latent_rows=cfg.model.latent_rows,
        num_tokens=world.NUM_CELLS,
        context_cap=cfg.model.context_cap,
    )


def _build_model(cfg: RunConfig) -> ModelBundle:
    dtype = torch.float64 if cfg.model.dtype == "float64" else torch.float32
    return build_model(
        _model_dims(cfg),
        seed=cfg.seed,
        disentangler=cfg.flags.disentangler,
        fusion_kind=cfg.flags.fusion,
        dtype=dtype,
    )


def _flags(cfg: RunConfig) -> AblationFlags:
    return AblationFlags(
        importance_sampling=cfg.flags.importance_sampling,
        fusion=cfg.flags.fusion,
        disentangler=cfg.flags.disentangler,
    )


# ---------------------------------------------------------------------------
# gen-data / fit-tokenizer
# ---------------------------------------------------------------------------

def _triplet_shard(seed: int, shard: int, count: int) -> list[world.TripletRecord]:
    rng = np.random.default_rng([seed, shard])
    return [world.build_triplet(world.random_factors(rng), rng) for _ in range(count)]


def cmd_gen_data(cfg: RunConfig, run_dir: Path, workers: int = 1) -> None:
    data_dir = run_dir / "data"
    data_dir.mkdir(exist_ok=True)
    shards = max(cfg.world.gen_shards, workers)
    n = cfg.world.num_triplets
    per_shard = [n // shards] * shards
    for i in range(n % shards):
        per_shard[i] += 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_triplet_shard, [cfg.seed] * shards, range(shards), per_shard))
    else:
        parts = [_triplet_shard(cfg.seed, s, c) for s, c in enumerate(per_shard)]
    records = [rec for part in parts for rec in part]
    n_train, n_valid, n_test = world._split_counts(n)
    triplet_splits = {
        "train": records[:n_train],
        "valid": records[n_train : n_train + n_valid],
        "test": records[n_train + n_valid :],
    }
    sessions = world.build_personal_dataset(
        cfg.world.num_users,
        cfg.world.sessions_per_user,
        cfg.seed,
        n_history=cfg.world.n_history,
        k_refs=cfg.world.k_refs,
        persona_jitter=cfg.world.persona_jitter,
    )
    manifest = world.DatasetManifest(
        version=world.MANIFEST_VERSION,
        num_triplets=n,
        num_sessions=sessions.manifest.num_sessions,
        triplet_splits={k: len(v) for k, v in triplet_splits.items()},
        session_splits=sessions.manifest.session_splits,
        seed=cfg.seed,
    )
    hashes = {}
    for split, recs in triplet_splits.items():
        path = data_dir / f"triplets_{split}.drcw"
        world.write_triplets(path, recs)
        hashes[f"sha256_triplets_{split}"] = world.file_sha256(path)
    for split in ("train", "valid", "test"):
        path = data_dir / f"sessions_{split}.drcw"
        world.write_sessions(path, sessions.split(split))
        hashes[f"sha256_sessions_{split}"] = world.file_sha256(path)
    world.write_manifest(data_dir / "manifest.txt", manifest)
    _write_meta(run_dir, "gen_data", hashes)
    print(f"wrote {n} triplets and {manifest.num_sessions} sessions under {data_dir}")


def cmd_fit_tokenizer(cfg: RunConfig, run_dir: Path) -> None:
    data_dir = run_dir / "data"
    triplets = world.read_triplets(_require(data_dir / "triplets_train.drcw", "triplet data"))
    corpus: list[world.ToyImage] = []
    for t in triplets:
        corpus.extend((t.anchor, t.pos_style, t.pos_semantic))
        if len(corpus) >= cfg.tokenizer.fit_corpus_size:
            break
    corpus = corpus[: cfg.tokenizer.fit_corpus_size]
    cb = tokenizer.fit_codebook(corpus, cfg.tokenizer.vocab_size, seed=cfg.seed)
    tok_dir = run_dir / "tokenizer"
    tok_dir.mkdir(exist_ok=True)
    path = tok_dir / "codebook.drcb"
    tokenizer.save_codebook(path, cb)
    _write_meta(run_dir, "fit_tokenizer", {"sha256_codebook": world.file_sha256(path)})
    print(f"fitted V={cb.vocab_size} codebook -> {path}")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _load_codebook(run_dir: Path) -> tokenizer.Codebook:
    return tokenizer.load_codebook(_require(run_dir / "tokenizer" / "codebook.drcb", "codebook"))


def cmd_train(cfg: RunConfig, run_dir: Path, stage: int, allow_mismatch: bool = False) -> None:
    data_dir = run_dir / "data"
    cb = _load_codebook(run_dir)
    model = _build_model(cfg)
    flags = _flags(cfg)
    stage_dir = run_dir / f"stage{stage}"
    stage_dir.mkdir(exist_ok=True)
    if stage == 1:
        train_split = world.read_triplets(_require(data_dir / "triplets_train.drcw", "triplet data"))
        valid_split = world.read_triplets(_require(data_dir / "triplets_valid.drcw", "triplet data"))
        train_tok = training.tokenize_triplets(train_split, cb)
        valid_tok = training.tokenize_triplets(valid_split, cb)
        epochs, batch, lr = cfg.train.stage1_epochs, cfg.train.stage1_batch, cfg.train.stage1_lr
    else:
        load_checkpoint(
            _require(run_dir / "stage1" / "best.drck", "stage-1 checkpoint"),
            model,
            expect_config_hash=config_hash(cfg),
            allow_mismatch=allow_mismatch,
        )
        train_split = world.read_sessions(_require(data_dir / "sessions_train.drcw", "session data"))
        valid_split = world.read_sessions(_require(data_dir / "sessions_valid.drcw", "session data"))
        train_tok = training.tokenize_sessions(train_split, cb, model)
        valid_tok = training.tokenize_sessions(valid_split, cb, model)
        epochs, batch, lr = cfg.train.stage2_epochs, cfg.train.stage2_batch, cfg.train.stage2_lr
    result = training.run_stage(
        stage,
        model,
        train_tok,
        valid_tok,
        flags,
        seed=cfg.seed,
        epochs=epochs,
        batch_size=batch,
        lr=lr,
        alpha_s=cfg.train.alpha_s,
        freeze_towers=cfg.train.freeze_towers_stage2 and stage == 2,
        log_path=stage_dir / "metrics.log",
        log_every=cfg.train.log_every,
    )
    steps = result.valid_history[-1][0]
    save_checkpoint(stage_dir / "best.drck", model, stage=stage, step=steps, config_hash=config_hash(cfg))
    _write_meta(
        run_dir,
        f"train_stage{stage}",
        {
            "best_valid_loss": f"{result.best_valid_loss:.6f}",
            "steps": str(steps),
            "sha256_checkpoint": world.file_sha256(stage_dir / "best.drck"),
        },
    )
    print(f"stage {stage} done: best valid loss {result.best_valid_loss:.4f} -> {stage_dir/'best.drck'}")


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _fit_eval_probes(cfg: RunConfig, run_dir: Path, model: ModelBundle, cb: tokenizer.Codebook):
    valid = world.read_triplets(_require(run_dir / "data" / "triplets_valid.drcw", "triplet data"))
    images = [t.anchor for t in valid]
    return evalkit.fit_representation_probes(model, cb, images, seed=cfg.eval.probe_seed)


def _plot_alpha_tradeoff(path: Path, grid, style_means, sem_means) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(grid, style_means, marker="o", label="style agreement")
    ax.plot(grid, sem_means, marker="s", label="semantic agreement")
    balance = [(a + b) / 2 for a, b in zip(style_means, sem_means)]
    ax.plot(grid, balance, marker="^", linestyle="--", label="balance")
    ax.set_xlabel("semantic mask ratio")
    ax.set_ylabel("probe agreement")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _plot_disentanglement(path: Path, report: evalkit.DisentanglementReport) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3.2))
    mat = report.as_matrix()
    im = ax.imshow(mat, vmin=0, vmax=1, cmap="viridis")
    ax.set_xticks([0, 1], ["style factors", "semantic factors"])
    ax.set_yticks([0, 1], ["style rep", "semantic rep"])
    for i in range(2):
        for j in range(2):
            ax.text(j, i, f"{mat[i, j]:.2f}", ha="center", va="center", color="white")
    fig.colorbar(im)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def cmd_eval(cfg: RunConfig, run_dir: Path, allow_mismatch: bool = False, workers: int = 1) -> None:
    cb = _load_codebook(run_dir)
    model = _build_model(cfg)
    load_checkpoint(
        _require(run_dir / "stage2" / "best.drck", "stage-2 checkpoint"),
        model,
        expect_config_hash=config_hash(cfg),
        allow_mismatch=allow_mismatch,
    )
    model.eval()
    style_probes, sem_probes = _fit_eval_probes(cfg, run_dir, model, cb)
    test_triplets = world.read_triplets(_require(run_dir / "data" / "triplets_test.drcw", "triplet data"))
    matrix = evalkit.disentanglement_matrix(
        model, cb, style_probes, sem_probes, [t.anchor for t in test_triplets]
    )
    sessions = world.read_sessions(_require(run_dir / "data" / "sessions_test.drcw", "session data"))
    sessions = sessions[: cfg.eval.max_eval_sessions]

    def eval_one(session):
        chosen, sweep = evalkit.alpha_sweep(
            model, cb, session, style_probes, sem_probes, alpha_s=cfg.train.alpha_s
        )
        recon = evalkit.recon_baseline(model, cb, session, style_probes, sem_probes)
        best = sweep[int(round(chosen * 10))]
        gen = evalkit.generate_for_session(model, cb, session, cfg.train.alpha_s, chosen)
        return chosen, sweep, best, recon, gen

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(eval_one, sessions))
    else:
        results = [eval_one(s) for s in sessions]

    eval_dir = run_dir / "eval"
    plots_dir = eval_dir / "plots"
    plots_dir.mkdir(parents=True, exist_ok=True)
    grid = evalkit.ALPHA_GRID
    style_by_alpha = np.array([[r.style_probe_agreement for r in sweep] for _, sweep, _, _, _ in results])
    sem_by_alpha = np.array([[r.semantic_probe_agreement for r in sweep] for _, sweep, _, _, _ in results])
    gen_images = [tokenizer.decode(g.numpy(), cb) for _, _, _, _, g in results]
    real_images = [s.target for s in sessions]
    fid = evalkit.fid_like(real_images, gen_images) if len(sessions) >= evalkit.MIN_FID_SET else float("nan")

    lines = [
        f"sessions={len(sessions)}",
        f"style_probe_agreement={np.mean([b.style_probe_agreement for _, _, b, _, _ in results]):.6f}",
        f"style_gram_cosine={np.mean([b.style_gram_cosine for _, _, b, _, _ in results]):.6f}",
        f"semantic_probe_agreement={np.mean([b.semantic_probe_agreement for _, _, b, _, _ in results]):.6f}",
        f"recon_style_probe_agreement={np.mean([r.style_probe_agreement for _, _, _, r, _ in results]):.6f}",
        f"recon_semantic_probe_agreement={np.mean([r.semantic_probe_agreement for _, _, _, r, _ in results]):.6f}",
        f"fidelity_frechet={fid:.6f}",
        f"mean_chosen_alpha={np.mean([c for c, _, _, _, _ in results]):.6f}",
        f"disentangle_style_rep_style={matrix.style_rep_style:.6f}",
        f"disentangle_style_rep_semantic={matrix.style_rep_semantic:.6f}",
        f"disentangle_sem_rep_style={matrix.sem_rep_style:.6f}",
        f"disentangle_sem_rep_semantic={matrix.sem_rep_semantic:.6f}",
    ]
    for i, alpha in enumerate(grid):
        lines.append(
            f"alpha_{alpha:.1f}: style={style_by_alpha[:, i].mean():.6f} semantic={sem_by_alpha[:, i].mean():.6f}"
        )
    (eval_dir / "report.txt").write_text("\n".join(lines) + "\n")

    rows = ["session\tchosen_alpha\tstyle\tgram_cosine\tsemantic\trecon_style\trecon_semantic"]
    for i, (chosen, _, best, recon, _) in enumerate(results):
        rows.append(
            f"{i}\t{chosen:.1f}\t{best.style_probe_agreement:.4f}\t{best.style_gram_cosine:.4f}"
            f"\t{best.semantic_probe_agreement:.4f}\t{recon.style_probe_agreement:.4f}"
            f"\t{recon.semantic_probe_agreement:.4f}"
        )
    (eval_dir / "sessions.tsv").write_text("\n".join(rows) + "\n")
    _plot_alpha_tradeoff(plots_dir / "alpha_tradeoff.png", grid, style_by_alpha.mean(0), sem_by_alpha.mean(0))
    _plot_disentanglement(plots_dir / "disentanglement.png", matrix)
    _write_meta(run_dir, "eval", {"sha256_report": world.file_sha256(eval_dir / "report.txt")})
    print((eval_dir / "report.txt").read_text())


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = (
    ("full", {}),
    ("no_importance", {"flags.importance_sampling": "false"}),
    ("no_fusion", {"flags.fusion": "concat"}),
    ("no_attention", {"flags.disentangler": "mlp"}),
)


def cmd_ablate(cfg: RunConfig, run_dir: Path, workers: int = 1) -> None:
    """Paired two-stage runs for the ablation table; shared seeds across variants."""
    ablate_dir = run_dir / "ablate"
    ablate_dir.mkdir(exist_ok=True)
    rows = ["variant\tseed\tstyle_alignment\tsemantic_alignment\tcomposite"]
    means: dict[str, list[float]] = {}
    for seed in cfg.eval.ablation_seeds:
        for variant, overrides in ABLATION_VARIANTS:
            sub_cfg = apply_overrides(cfg, [f"{k}={v}" for k, v in overrides.items()] + [f"seed={seed}"])
            sub_args = argparse.Namespace(
                run_root=str(ablate_dir), run=f"{variant}_seed{seed}", force_config=True
            )
            sub_dir = prepare_run_dir(sub_cfg, sub_args)
            cmd_gen_data(sub_cfg, sub_dir, workers=workers)
            cmd_fit_tokenizer(sub_cfg, sub_dir)
            cmd_train(sub_cfg, sub_dir, stage=1)
            cmd_train(sub_cfg, sub_dir, stage=2)
            style_score, sem_score = _ablation_scores(sub_cfg, sub_dir)
            composite = 0.5 * (style_score + sem_score)
            rows.append(f"{variant}\t{seed}\t{style_score:.4f}\t{sem_score:.4f}\t{composite:.4f}")
            means.setdefault(variant, []).append(composite)
            means.setdefault(variant + "_style", []).append(style_score)
            means.setdefault(variant + "_semantic", []).append(sem_score)
            print(rows[-1])
    rows.append("")
    for variant, _ in ABLATION_VARIANTS:
        rows.append(
            f"mean_{variant}\t-\t{np.mean(means[variant + '_style']):.4f}"
            f"\t{np.mean(means[variant + '_semantic']):.4f}\t{np.mean(means[variant]):.4f}"
        )
    (ablate_dir / "table.tsv").write_text("\n".join(rows) + "\n")
    print((ablate_dir / "table.tsv").read_text())


def _ablation_scores(cfg: RunConfig, run_dir: Path) -> tuple[float, float]:
    cb = _load_codebook(run_dir)
    model = _build_model(cfg)
    load_checkpoint(run_dir / "stage2" / "best.drck", model, expect_config_hash=config_hash(cfg))
    model.eval()
    style_probes, sem_probes = _fit_eval_probes(cfg, run_dir, model, cb)
    sessions = world.read_sessions(run_dir / "data" / "sessions_test.drcw")
    sessions = sessions[: cfg.eval.ablation_sessions]
    style_scores, sem_scores = [], []
    for session in sessions:
        chosen, sweep = evalkit.alpha_sweep(
            model, cb, session, style_probes, sem_probes, alpha_s=cfg.train.alpha_s
        )
        best = sweep[int(round(chosen * 10))]
        style_scores.append(best.style_probe_agreement)
        sem_scores.append(best.semantic_probe_agreement)
    return float(np.mean(style_scores)), float(np.mean(sem_scores))


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def cmd_infer(
    cfg: RunConfig,
    run_dir: Path,
    alpha_m: float,
    session_index: int = 0,
    session_file: Path | None = None,
    reference_index: int = 0,
    allow_mismatch: bool = False,
) -> None:
    if not (0.0 <= alpha_m <= 1.0):
        raise ConfigError("--alpha-m must lie in [0, 1]")
    cb = _load_codebook(run_dir)
    model = _build_model(cfg)
    load_checkpoint(
        _require(run_dir / "stage2" / "best.drck", "stage-2 checkpoint"),
        model,
        expect_config_hash=config_hash(cfg),
        allow_mismatch=allow_mismatch,
    )
    model.eval()
    if session_file is not None:
        sessions = world.read_sessions(_require(Path(session_file), "session file"))
    else:
        sessions = world.read_sessions(_require(run_dir / "data" / "sessions_test.drcw", "session data"))
    if not (0 <= session_index < len(sessions)):
        raise InputError(f"session index {session_index} out of range [0,{len(sessions)})")
    session = sessions[session_index]
    gen = evalkit.generate_for_session(
        model, cb, session, cfg.train.alpha_s, alpha_m, ref_index=reference_index
    )
    image = tokenizer.decode(gen.numpy(), cb)
    infer_dir = run_dir / "infer"
    infer_dir.mkdir(exist_ok=True)
    stem = f"session{session_index}_alpha{alpha_m:.2f}_ref{reference_index}"
    png_path = infer_dir / f"{stem}.png"
    _save_png(png_path, image.pixels)
    tokens_path = infer_dir / f"{stem}.tokens"
    tokens_path.write_text(" ".join(str(int(t)) for t in gen) + "\n")
    print(f"wrote {png_path} and {tokens_path}")


def _save_png(path: Path, pixels: np.ndarray, scale: int = 8) -> None:
    from PIL import Image

    arr = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    arr = np.kron(arr, np.ones((scale, scale, 1), dtype=np.uint8))
    Image.fromarray(arr).save(path)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _base_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg = apply_overrides(cfg, [f"seed={args.seed}"])
    cfg.validate()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stylesem", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="YAML run configuration")
        p.add_argument("--run-root", default=None, help=f"run root (or ${RUN_ROOT_ENV}, default ./runs)")
        p.add_argument("--run", default="default", help="run name under the run root")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--force-config", action="store_true", help="replace a differing stored config")

    p = sub.add_parser("gen-data", help="generate the triplet and session datasets")
    common(p)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("fit-tokenizer", help="fit the k-means codebook")
    common(p)

    p = sub.add_parser("train", help="train one stage")
    common(p)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--allow-config-mismatch", action="store_true")

    p = sub.add_parser("eval", help="evaluate the stage-2 checkpoint")
    common(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--allow-config-mismatch", action="store_true")

    p = sub.add_parser("ablate", help="paired ablation runs and comparison table")
    common(p)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("infer", help="personalized generation for one session")
    common(p)
    p.add_argument("--alpha-m", type=float, required=True, help="semantic mask ratio in [0, 1]")
    p.add_argument("--session-index", type=int, default=0)
    p.add_argument("--session-file", type=Path, default=None)
    p.add_argument("--reference-index", type=int, default=0)
    p.add_argument("--allow-config-mismatch", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _base_config(args)
        run_dir = prepare_run_dir(cfg, args)
        if args.command == "gen-data":
            cmd_gen_data(cfg, run_dir, workers=args.workers)
        elif args.command == "fit-tokenizer":
            cmd_fit_tokenizer(cfg, run_dir)
        elif args.command == "train":
            cmd_train(cfg, run_dir, stage=args.stage, allow_mismatch=args.allow_config_mismatch)
        elif args.command == "eval":
            cmd_eval(cfg, run_dir, allow_mismatch=args.allow_config_mismatch, workers=args.workers)
        elif args.command == "ablate":
            cmd_ablate(cfg, run_dir, workers=args.workers)
        elif args.command == "infer":
            cmd_infer(
                cfg,
                run_dir,
                alpha_m=args.alpha_m,
                session_index=args.session_index,
                session_file=args.session_file,
                reference_index=args.reference_index,
                allow_mismatch=args.allow_config_mismatch,
            )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except InputError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
