"""Command-line entry point: ``python -m popsteer <command> --config run.ini``.

Commands run one pipeline stage each and communicate through versioned
artifacts in the output directory; ``pipeline`` runs them all in order.
Exit codes: 0 success, 1 usage or configuration error, 2 data or artifact
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from popsteer import backbone as bb_mod
from popsteer import bias, data, evaluation
from popsteer import sae as sae_mod
from popsteer.artifacts import write_table
from popsteer.config import RunConfig, load_config, with_overrides
from popsteer.errors import ConfigError, PopSteerError

log = logging.getLogger("popsteer")

STATS_COLUMNS = ["users", "items", "interactions", "density"]


class Workspace:
    """Artifact paths and stage-checked loaders for one run directory."""

    def __init__(self, cfg: RunConfig, threads: int = 1):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.threads = threads
        self.hashes = cfg.stage_hashes()
        self.config_hash = cfg.config_hash()

    def path(self, name: str) -> Path:
        return self.out / name

    # -- loaders (each validates the artifact's stage hash)

    def labels(self) -> tuple[tuple[str, ...], tuple[str, ...]]:
        stage = self.hashes["data"]
        return (data.read_id_map(self.path("user_map.tsv"), "user_map", stage),
                data.read_id_map(self.path("item_map.tsv"), "item_map", stage))

    def split(self) -> data.SplitBundle:
        users, items = self.labels()
        return data.read_split(self.path("split.tsv"), users, items, self.hashes["data"])

    def partition(self) -> data.PopularityPartition:
        return data.read_partition(self.path("partition.tsv"), self.hashes["data"])

    def profiles(self) -> tuple[data.InteractionLog, data.InteractionLog]:
        users, items = self.labels()
        stage = self.hashes["data"]
        return tuple(data.read_log_table(self.path(f"profiles_{mode}.tsv"), f"profiles_{mode}", users, items, stage)
                     for mode in ("pop", "unpop"))

    def backbone(self) -> bb_mod.BackboneModel:
        return bb_mod.load_backbone(self.path("backbone.bin"), stage=self.hashes["backbone"])

    def sae(self) -> sae_mod.SaeModel:
        return sae_mod.load_sae(self.path("sae.bin"), stage=self.hashes["sae"])

    def stats(self) -> bias.NeuronStats:
        return bias.read_neuron_stats(self.path("neuron_stats.tsv"), self.hashes["stats"])

    def context(self, with_sae: bool = True) -> evaluation.SweepContext:
        cfg = self.cfg
        return evaluation.SweepContext(
            self.backbone(), self.split(), self.partition(),
            self.sae() if with_sae else None, self.stats() if with_sae else None,
            k=cfg.eval.k, threads=self.threads, n_candidates=cfg.rerank.n_candidates,
            seed=cfg.steer.noise_seed, noise_selection=cfg.steer.noise_selection,
        )

    def write_csv(self, name: str, kind: str, columns, rows, comments=()) -> Path:
        path = write_table(self.path(name), kind, columns, rows, stage=self.config_hash, sep=",",
                           extra_comments=comments)
        log.info("wrote %s", path)
        return path


# -------------------------------------------------------------------- commands


def cmd_generate(ws: Workspace) -> None:
    g = ws.cfg.generate
    log_ = data.generate_powerlaw_dataset(g.n_users, g.n_items, (g.events_min, g.events_max), g.zipf_exponent,
                                          g.seed, n_clusters=g.n_clusters, affinity=g.affinity)
    path = data.write_interactions(log_, ws.path("interactions.tsv"))
    log.info("wrote %s (%d events)", path, log_.n_events)


def cmd_prepare(ws: Workspace) -> None:
    cfg, stage = ws.cfg, ws.hashes["data"]
    if cfg.data.path:
        raw = data.load_interactions(cfg.data.path, cfg.data.format)
    else:
        raw = data.load_interactions(ws.path("interactions.tsv"), "tsv")
    filtered = data.kcore_filter(raw, cfg.data.kcore)
    split = data.chronological_split(filtered)
    partition = data.partition_popularity(split)
    data.write_id_maps(filtered, ws.out, stage)
    data.write_split(split, ws.path("split.tsv"), stage)
    data.write_partition(partition, ws.path("partition.tsv"), stage)
    for mode, offset in (("pop", 0), ("unpop", 1)):
        synth = data.synthesize_profiles(split, partition, mode, cfg.data.profile_seed + offset)
        data.write_log_table(synth, ws.path(f"profiles_{mode}.tsv"), f"profiles_{mode}", stage)
    s = filtered.stats()
    write_table(ws.path("dataset_stats.tsv"), "dataset_stats", STATS_COLUMNS,
                [[s["users"], s["items"], s["interactions"], f"{s['density']:.6f}"]], stage=stage)
    log.info("prepared %d users, %d items, %d events; head %d items (%.3f), tail %d items (%.3f)",
             s["users"], s["items"], s["interactions"], len(partition.head), partition.head_mass,
             len(partition.tail), partition.tail_mass)


def cmd_train_backbone(ws: Workspace) -> None:
    model = bb_mod.train_backbone(ws.split(), ws.cfg.backbone)
    bb_mod.save_backbone(model, ws.path("backbone.bin"), stage=ws.hashes["backbone"])
    rows = [[i + 1, f"{v:.6f}"] for i, v in enumerate(model.history)]
    write_table(ws.path("backbone_history.tsv"), "backbone_history", ["epoch", "valid_ndcg"], rows,
                stage=ws.hashes["backbone"])


def cmd_train_sae(ws: Workspace) -> None:
    cfg = ws.cfg.sae
    backbone = ws.backbone()
    X = bb_mod.prefix_embeddings(backbone, ws.split())
    model = sae_mod.init_sae(backbone.dim, cfg.scale, cfg.k, cfg.seed, gamma=cfg.gamma,
                             k_aux=cfg.resolved_k_aux(), dead_window=cfg.resolved_dead_window())
    model = sae_mod.train_sae(model, X, cfg)
    sae_mod.save_sae(model, ws.path("sae.bin"), stage=ws.hashes["sae"])
    final = sae_mod.reconstruction_report(model, X)
    rows = [[i + 1, f"{v:.6f}"] for i, v in enumerate(model.history)]
    write_table(ws.path("sae_history.tsv"), "sae_history", ["epoch", "normalized_mse"], rows,
                stage=ws.hashes["sae"],
                extra_comments=[f"final normalized_mse={final.normalized_mse:.6f} "
                                f"dead_fraction={final.dead_fraction:.6f} mean_active={final.mean_active:.3f}"])


def cmd_analyze(ws: Workspace) -> None:
    pop, unpop = ws.profiles()
    stats = bias.collect_activation_stats(ws.sae(), ws.backbone(), pop, unpop, threads=ws.threads,
                                          stage=ws.cfg.steer.stats_stage)
    bias.write_neuron_stats(stats, ws.path("neuron_stats.tsv"), ws.hashes["stats"])
    plan = bias.build_steering_plan(stats, ws.cfg.steer.alpha, ws.cfg.n_select_resolved)
    bias.write_plan(plan, ws.path("steering_plan.tsv"), ws.hashes["plan"])
    d = stats.cohens_d
    log.info("cohen's d: %d neurons > 1, %d neurons < -1, %d degenerate", int((d > 1).sum()),
             int((d < -1).sum()), int(stats.degenerate.sum()))


def cmd_steer_eval(ws: Workspace) -> None:
    ctx = ws.context()
    plan = bias.read_plan(ws.path("steering_plan.tsv"), ws.hashes["plan"])
    common = dict(k=ctx.k, threads=ctx.threads, lt_mode=ws.cfg.eval.lt_mode)
    reports = [
        ("backbone", "-", evaluation.evaluate_pipeline(ctx.backbone, ctx.split, ctx.partition, **common)),
        ("sae", "-", evaluation.evaluate_pipeline(ctx.backbone, ctx.split, ctx.partition, sae=ctx.sae, **common)),
    ]
    steered = evaluation.evaluate_pipeline(ctx.backbone, ctx.split, ctx.partition, sae=ctx.sae, plan=plan, **common)
    params = evaluation.format_params({"alpha": ws.cfg.steer.alpha, "n_select": len(plan.neurons)})
    reports.append(("popsteer", params, steered))
    ws.write_csv("steer_eval.csv", "report", evaluation.REPORT_COLUMNS,
                 [r.row(method, p) for method, p, r in reports])
    evaluation.write_exposure(steered, ctx.partition, ws.path("exposure.tsv"), ws.config_hash)


def sweep_grids(cfg: RunConfig) -> dict:
    r = cfg.rerank
    known = {
        "backbone": {},
        "sae": {},
        "popsteer": {"alpha": list(cfg.steer.alpha_grid), "n_select": cfg.n_select_values},
        "ipr": {"alpha": list(r.ipr_alpha_grid)},
        "fair": {"p": list(r.fair_p_grid), "alpha": [r.fair_alpha]},
        "random": {"pool": list(r.random_pool_grid)},
    }
    unknown = [m for m in cfg.eval.methods if m not in known]
    if unknown:
        raise ConfigError(f"unknown sweep methods {unknown}; known: {', '.join(known)}")
    return {m: known[m] for m in cfg.eval.methods}


def cmd_sweep(ws: Workspace) -> None:
    grids = sweep_grids(ws.cfg)
    needs_sae = any(m in grids for m in ("sae", "popsteer"))
    rows = evaluation.sweep(ws.context(with_sae=needs_sae), evaluation.expand_grid(grids))
    ws.write_csv("sweep.csv", "report", evaluation.REPORT_COLUMNS, rows)


def cmd_ablate(ws: Workspace) -> None:
    cfg = ws.cfg.steer
    ctx = ws.context()
    n_grid = ws.cfg.n_select_values
    reference = evaluation.run_method(ctx, "sae", {}).ndcg
    alpha, steered = evaluation.tune_alpha(ctx, cfg.alpha_grid, max(n_grid), reference, cfg.max_drop)
    xi, noise = evaluation.match_noise_xi(ctx, max(n_grid), steered.ndcg, steps=cfg.noise_search_steps,
                                          xi_max=cfg.noise_xi_max)
    log.info("tuned alpha=%s (drop %.4f), matched xi=%.6f (drop %.4f)", alpha,
             evaluation.relative_drop(steered.ndcg, reference), xi, evaluation.relative_drop(noise.ndcg, reference))
    rows = evaluation.ablation_rows(ctx, alpha, xi, n_grid)
    ws.write_csv("ablate.csv", "ablation", evaluation.ABLATION_COLUMNS, rows,
                 comments=[f"alpha={alpha} xi={xi:.6f} reference_ndcg={reference:.6f} max_drop={cfg.max_drop}"])


def cmd_deactivate(ws: Workspace) -> None:
    cfg = ws.cfg.deactivate
    ctx = ws.context()
    rows = []
    for side in ("popular", "unpopular"):
        available = len(bias.qualifying_neurons(ctx.stats, cfg.threshold, side))
        grid = [kp for kp in cfg.kprime_grid if kp <= available]
        if len(grid) < len(cfg.kprime_grid):
            log.warning("%s side: only %d qualifying neurons, K' grid clipped to %s", side, available, grid)
        series = bias.deactivation_study(ctx.sae, ctx.backbone, ctx.stats, ctx.split, cfg.threshold, grid, side,
                                         k=ctx.k, threads=ctx.threads)
        rows.extend([kp, side, f"{g:.6f}"] for kp, g in series)
    ws.write_csv("deactivate.csv", "deactivation", ["kprime", "side", "gini"], rows,
                 comments=[f"threshold={cfg.threshold}"])


STAGES = [
    ("prepare", cmd_prepare),
    ("train-backbone", cmd_train_backbone),
    ("train-sae", cmd_train_sae),
    ("analyze", cmd_analyze),
    ("steer-eval", cmd_steer_eval),
    ("sweep", cmd_sweep),
    ("ablate", cmd_ablate),
    ("deactivate", cmd_deactivate),
]


def cmd_pipeline(ws: Workspace) -> None:
    if not ws.cfg.data.path:
        cmd_generate(ws)
    for name, fn in STAGES:
        log.info("== %s", name)
        fn(ws)


COMMANDS = {"generate": cmd_generate, **dict(STAGES), "pipeline": cmd_pipeline}


# ------------------------------------------------------------------ argparse


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="popsteer", description="Popularity-neuron steering pipeline.")
    parser.add_argument("command", choices=list(COMMANDS))
    parser.add_argument("--config", help="INI config file (defaults apply when omitted)")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for per-user work")
    parser.add_argument("--out", help="output directory (overrides [output] dir)")
    parser.add_argument("--alpha", type=float, help="steering strength")
    parser.add_argument("--n-select", type=int, help="number of steered neurons")
    parser.add_argument("--k", type=int, help="SAE sparsity K")
    parser.add_argument("--scale", type=int, help="SAE scale factor s (N = s * d)")
    parser.add_argument("-q", "--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = with_overrides(load_config(args.config), alpha=args.alpha, n_select=args.n_select,
                             k=args.k, scale=args.scale, output_dir=args.out)
        cfg.validate()
        COMMANDS[args.command](Workspace(cfg, args.threads))
    except PopSteerError as exc:
        print(f"popsteer: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0
