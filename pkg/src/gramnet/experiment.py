"""Glue between a :class:`RunConfig` and the library: datasets, models, studies."""

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import MetricsWriter, gen_toy_binary, load_image_dataset, read_raw_u8
from .kernels import KernelKind
from .network import LayerSpec, Model, ModelConfig, gram_factor_value, raw_from_factor
from .objective import ObjectiveConfig, assemble_objective
from .skr import RegConfig
from .trainer import TrainConfig, seeded_streams, train_loop


def load_datasets(run):
    """``(train, eval)`` datasets named by the config; eval may be ``None``."""
    if run["data.kind"] == "toy":
        seed = run["data.seed"]
        train = gen_toy_binary(run["data.n"], seed, run["data.noise"])
        ev = gen_toy_binary(run["data.eval_n"], seed + 1, run["data.noise"]) \
            if run["data.eval_n"] >= 4 else None
        if ev is not None:
            ev.split = "eval"
        return train, ev
    if not run["data.path"]:
        raise ValueError("data.path is required for raw_u8 data")
    _, lab = read_raw_u8(run["data.path"])
    classes = int(lab.max()) + 1 if lab.size else 1
    ev = None
    if run["data.eval_path"]:
        _, elab = read_raw_u8(run["data.eval_path"])
        classes = max(classes, int(elab.max()) + 1 if elab.size else 1)
    train = load_image_dataset(run["data.path"], classes=classes)
    if run["data.eval_path"]:
        ev = load_image_dataset(run["data.eval_path"], stats=train.stats, split="eval",
                                classes=classes)
    return train, ev


def model_config(run, dataset, precision=None):
    tokens = [t for t in run["model.layers"] if t]
    inducing = list(run["model.inducing"])
    if len(inducing) == 1:
        inducing = inducing * (len(tokens) + 1)
    if len(inducing) != len(tokens) + 1:
        raise ValueError(f"model.inducing needs 1 or {len(tokens) + 1} values, got {len(inducing)}")
    layers = tuple(LayerSpec.parse(t, p) for t, p in zip(tokens, inducing[1:]))
    ls = run["model.lengthscale"]
    kernel = KernelKind(run["model.kernel"], ls if run["model.kernel"] == "sq_exp" else None)
    final = run["model.final_kernel"] or run["model.kernel"]
    final_kernel = KernelKind(final, ls if final == "sq_exp" else None)
    return ModelConfig(
        in_channels=dataset.channels, classes=dataset.classes, inducing_inputs=inducing[0],
        layers=layers, kernel=kernel, final_kernel=final_kernel,
        kernel_jitter=run["model.kernel_jitter"], batch_norm=run["model.batch_norm"],
        skips=run["model.skips"], mixup_fc=run["model.mixup_fc"],
        precision=precision or run["precision"])


def reg_config(run):
    gamma = run["skr.gamma"]
    enabled = run["skr.enabled"] and not (gamma is not None and math.isinf(gamma))
    return RegConfig(gamma=None if gamma is None or math.isinf(gamma) else int(gamma),
                     jitter=run["skr.jitter"], enabled=enabled,
                     gamma_ratio=run["skr.gamma_ratio"])


def objective_config(run):
    nu = run["objective.nu"]
    return ObjectiveConfig(nu=nu[0] if len(nu) == 1 else tuple(nu),
                           kl_mode=run["objective.kl_mode"],
                           mc_samples_train=run["objective.mc_samples_train"])


def train_config(run):
    return TrainConfig(
        lr=run["train.lr"], decay_epochs=run["train.decay_epochs"],
        decay_factor=run["train.decay_factor"], beta1=run["train.beta1"],
        beta2=run["train.beta2"], eps=run["train.eps"], epochs=run["train.epochs"],
        batch_size=run["train.batch_size"], seed=run["seed"], precision=run["precision"],
        mc_samples_train=run["objective.mc_samples_train"],
        mc_samples_eval=run["train.mc_samples_eval"], eval_every=run["train.eval_every"],
        checkpoint_every=run["train.checkpoint_every"])


def build_model(run, train, precision=None):
    """Seeded model for ``run``.

    Initialisation always happens in double precision and is then cast, so
    single- and double-precision runs start from the same point.
    """
    cfg = model_config(run, train, precision)
    double = model_config(run, train, "double")
    rng = seeded_streams(run["seed"])["init"]
    init = Model.initialise(double, train.inputs, rng, reg_config(run))
    return Model(cfg, init.params)


def model_for_params(run, train, params):
    return Model(model_config(run, train), params)


# ---------------------------------------------------------------------------
# gradient check


def run_gradcheck(run, dataset=None):
    """Finite-difference check of the full objective at a seeded point.

    Uses the first ``gradcheck.n`` training points, evaluation-mode SKR and
    frozen Monte-Carlo noise so the loss is a deterministic function of the
    parameters.  Parameters are nudged off their initial values first; Gram
    factors are perturbed relative to themselves so an ill-conditioned prior
    does not turn into a much worse one.
    """
    if dataset is None:
        dataset, _ = load_datasets(run)
    sub = dataset.subset(np.arange(min(run["gradcheck.n"], len(dataset))))
    model = build_model(run, sub, "double")
    rng = np.random.default_rng(np.random.SeedSequence([run["seed"], 11]))
    params = {}
    for k, v in model.params.items():
        if k.endswith(".gram") or k == "head.sigma":
            # perturb the factor in its own coordinates: small pivots stay small
            low = gram_factor_value(v)
            n = len(low)
            params[k] = raw_from_factor(low @ (np.eye(n) + 0.05 * np.tril(rng.standard_normal((n, n)))))
        else:
            params[k] = v + 0.05 * rng.standard_normal(v.shape)
    obj = objective_config(run)
    reg = reg_config(run)
    noise = rng.standard_normal((obj.mc_samples_train, len(sub), sub.classes))

    def loss(p):
        res = model.forward(sub.inputs, mode="eval", reg=reg, n_mc=obj.mc_samples_train,
                            noise=noise, params=p)
        return assemble_objective(res, sub.labels, obj, len(sub), model.config.kernel_jitter).loss

    return ad.grad_check(loss, params, run["gradcheck.step"])


# ---------------------------------------------------------------------------
# condition-number study

COND_COLUMNS = ["cell", "gamma", "nu", "kl_mode", "epoch", "cond_g_ii", "objective", "status"]
SUMMARY_COLUMNS = ["cell", "gamma", "nu", "kl_mode", "epochs_run", "final_cond", "status"]


@dataclass(frozen=True)
class Cell:
    gamma: float      # math.inf means no SKR
    nu: float
    kl_mode: str

    @property
    def name(self):
        g = "inf" if math.isinf(self.gamma) else str(int(self.gamma))
        return f"gamma-{g}_nu-{self.nu:g}_{self.kl_mode}"


def cond_cells(run):
    """Gamma sweep at nu = 0, then nu x kl-mode sweep without SKR."""
    modes = run["cond.kl_modes"] or ("taylor",)
    cells = []
    for g in run["cond.gammas"]:
        cells.append(Cell(math.inf if g is None else float(g), 0.0, modes[0]))
    for mode in modes:
        for nu in run["cond.nus"]:
            cells.append(Cell(math.inf, float(nu), mode))
    seen, out = set(), []
    for c in cells:
        key = (c.gamma, c.nu, c.kl_mode if c.nu else "")
        if key not in seen:
            seen.add(key)
            out.append(c)
    return out


def cell_run_config(run, cell):
    gamma = "inf" if math.isinf(cell.gamma) else str(int(cell.gamma))
    return run.with_overrides({
        "precision": "double", "train.decay_epochs": "", "skr.gamma": gamma,
        "skr.enabled": "false" if math.isinf(cell.gamma) else "true",
        "objective.nu": repr(cell.nu), "objective.kl_mode": cell.kl_mode,
    }, check_paths=False)


def run_cell(run, cell, out_dir):
    """Train one study cell, logging cond(G_ii) per epoch to its own CSV."""
    crun = cell_run_config(run, cell)
    train, _ = load_datasets(crun)
    model = build_model(crun, train)
    path = os.path.join(out_dir, f"cond_{cell.name}.csv")
    if os.path.exists(path):
        os.remove(path)
    gamma_txt = "inf" if math.isinf(cell.gamma) else str(int(cell.gamma))

    class CellWriter:
        def __init__(self):
            self.w = MetricsWriter(path, COND_COLUMNS)

        def write(self, row):
            cond = row.get("cond_g_ii_1", float("nan"))
            self.w.write({"cell": cell.name, "gamma": gamma_txt, "nu": cell.nu,
                          "kl_mode": cell.kl_mode, "epoch": row["epoch"], "cond_g_ii": cond,
                          "objective": row["objective"], "status": row["status"]})

    writer = CellWriter()
    try:
        res = train_loop(model, train, train_config(crun), objective_config(crun),
                         reg_config(crun), eval_data=None, writer=writer)
    finally:
        writer.w.close()
    ok_rows = [r for r in res.rows if r["status"] == "ok"]
    final = ok_rows[-1].get("cond_g_ii_1", float("nan")) if ok_rows else float("nan")
    return {"cell": cell.name, "gamma": gamma_txt, "nu": cell.nu, "kl_mode": cell.kl_mode,
            "epochs_run": len(ok_rows), "final_cond": final, "status": res.status}


def _run_cell_star(args):
    return run_cell(*args)


def cond_study(run, out_dir):
    """Run every cell; a failing cell is recorded and the study continues."""
    os.makedirs(out_dir, exist_ok=True)
    cells = cond_cells(run)
    jobs = [(run, c, out_dir) for c in cells]
    if run["cond.workers"] > 1:
        with ProcessPoolExecutor(run["cond.workers"]) as pool:
            rows = list(pool.map(_run_cell_star, jobs))
    else:
        rows = [_run_cell_star(j) for j in jobs]
    summary = os.path.join(out_dir, "cond_summary.csv")
    if os.path.exists(summary):
        os.remove(summary)
    with MetricsWriter(summary, SUMMARY_COLUMNS) as w:
        for r in rows:
            w.write(r)
    return rows
