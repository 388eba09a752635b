"""Experiment runner: simulate data, run samplers, compare runs.

Subcommands:

    gradbridge run <config.json>       sample one posterior, write artifacts
    gradbridge simulate <config.json>  write the synthetic dataset only
    gradbridge compare <manifest...>   tabulate metrics/sd across runs
    gradbridge check                   fast gradient/duality/oracle suite

Configs are JSON (validated against an explicit schema). All randomness is
counter-based Philox keyed by (seed, stream); chain c of a run uses stream
c, so reruns of one config are byte-identical on every output except the
manifest's wall_time_s field.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import jsonschema

from .bridge import (
    KernelConfig,
    check_gradient,
    posterior_callables,
    posterior_value_and_grad,
    refine_subproblem,
)
from .diagnostics import (
    autocorrelation,
    davies_bouldin,
    effective_sample_size,
    normalized_mutual_information,
    principal_components,
    summarize_draws,
)
from .lp_oracle import max_flow, min_cut_by_enumeration, verify_cut
from .models.flow import (
    FlowDataset,
    FlowModelParams,
    FlowNetworkSpec,
    bundled_network,
    flow_problem,
    reparameterize_flows,
)
from .models.gibbs import gibbs_baseline
from .models.latent_quadratic import (
    LatentQuadraticModel,
    latent_quadratic_problem,
    simulate_latent_binary,
)
from .models.normal_means import NormalMeansModel, normal_means_problem
from .models.procrustes import (
    ProcrustesDualModel,
    aligned_representation,
    procrustes_problem,
    simulate_procrustes_batches,
)
from .sampler import MassSpec, SamplerConfig, build_mass_inverse, find_posterior_mode, make_rng, nuts_sample

MODELS = ("normal_means", "flow", "procrustes", "latent_quadratic")
POSTERIORS = ("gradient_bridged", "gibbs_plain", "gibbs_joint")
MASSES = ("projection", "identity", "default_diag")

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["model", "posterior", "sampler", "data"],
    "properties": {
        "model": {"enum": list(MODELS)},
        "posterior": {"enum": list(POSTERIORS)},
        "lambda": {"type": "number", "minimum": 0},
        "barrier_t": {"type": "number", "exclusiveMinimum": 0},
        "mass": {"enum": list(MASSES)},
        "output_dir": {"type": "string"},
        "mode_max_iters": {"type": "integer", "minimum": 1},
        "sampler": {
            "type": "object",
            "properties": {
                "n_iterations": {"type": "integer", "minimum": 2},
                "n_burnin": {"type": "integer", "minimum": 0},
                "thin": {"type": "integer", "minimum": 1},
                "target_accept": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "max_tree_depth": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "init": {"oneOf": [{"const": "auto"}, {"type": "array", "items": {"type": "number"}}]},
            },
        },
        "data": {
            "type": "object",
            "properties": {"path": {"type": "string"}, "simulate": {"type": "object"}},
            "oneOf": [{"required": ["path"]}, {"required": ["simulate"]}],
        },
    },
}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["config", "model", "posterior", "mass", "seed", "chains", "files", "wall_time_s"],
    "properties": {
        "chains": {"type": "array", "items": {"type": "object", "required": ["n_grad_evals", "ess_median"]}},
        "files": {"type": "object"},
        "wall_time_s": {"type": "number"},
    },
}

METRICS_SCHEMA = {"type": "object", "required": ["model"]}

FLOW_SIM_DEFAULTS = {"n_obs": 1000, "noise_sd": 0.5, "c_noise_sd": 0.5}


def simulate_flow_data(spec: FlowNetworkSpec, beta0, n_obs: int, noise_sd: float, c_noise_sd: float, seed: int) -> FlowDataset:
    """Noisy measurements of the optimal flow plus one designed-capacity
    measurement: y^s = z0 + noise (s = 1..n_obs), c = beta0 + noise."""
    beta0 = np.asarray(beta0, dtype=float)
    if np.any(beta0 <= 0):
        raise ValueError("ground-truth capacities must be strictly positive")
    spec.check()
    z0 = max_flow(spec, beta0).flow
    rng = make_rng(seed, stream=1)
    y = z0 + noise_sd * rng.standard_normal((n_obs, spec.n_edges))
    c = beta0 + c_noise_sd * rng.standard_normal(spec.n_edges)
    return FlowDataset(spec=spec, beta0=beta0, z0=z0, c=c, y=y, noise_sd=noise_sd, c_noise_sd=c_noise_sd, seed=seed)


def _simulate_normal_means(block: dict) -> dict:
    n = int(block.get("n", 100))
    tau = float(block.get("tau", 1.0))
    beta0 = float(block.get("beta0", 1.0))
    seed = int(block["seed"])
    rng = make_rng(seed, stream=2)
    z = np.sqrt(beta0) * rng.standard_normal(n)
    y = z + np.sqrt(tau) * rng.standard_normal(n)
    return {"model": "normal_means", "tau": tau, "beta0": beta0, "seed": seed, "y": y.tolist(), "z_true": z.tolist()}


def _simulate_latent_quadratic(block: dict) -> dict:
    n = int(block.get("n", 80))
    seed = int(block["seed"])
    x, y, z_true = simulate_latent_binary(n, seed=seed)
    return {
        "model": "latent_quadratic",
        "seed": seed,
        "x": x.tolist(),
        "y": y.tolist(),
        "z_true": z_true.tolist(),
    }


def _write_procrustes_dataset(outdir: Path, block: dict) -> None:
    d = int(block.get("d", 3))
    n = int(block.get("n", 40))
    n_batches = int(block.get("n_batches", 2))
    n_types = int(block.get("n_types", 3))
    noise_sd = float(block.get("noise_sd", 0.02))
    seed = int(block["seed"])
    X_list, labels, _ = simulate_procrustes_batches(d, n, n_batches, n_types, noise_sd, seed)
    outdir.mkdir(parents=True, exist_ok=True)
    for b, X in enumerate(X_list):
        np.savetxt(outdir / f"batch_{b}.csv", X, delimiter=",", fmt="%.17g")
    np.savetxt(outdir / "labels.csv", np.asarray(labels, dtype=int), delimiter=",", fmt="%d")
    meta = {
        "model": "procrustes",
        "d": d,
        "n": n,
        "n_batches": n_batches,
        "n_types": n_types,
        "noise_sd": noise_sd,
        "seed": seed,
        "batches": [f"batch_{b}.csv" for b in range(n_batches)],
        "labels": "labels.csv",
    }
    with open(outdir / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def simulate_dataset(model: str, block: dict, out_path: Path) -> Path:
    """Write the synthetic dataset for one model; returns the data path."""
    if "seed" not in block:
        raise ValueError("simulation block must carry a seed")
    if model == "flow":
        spec = FlowNetworkSpec.from_json(block["spec_path"]) if "spec_path" in block else bundled_network()
        beta0 = np.asarray(block.get("beta0", spec.designed_capacity), dtype=float)
        ds = simulate_flow_data(
            spec,
            beta0,
            int(block.get("n_obs", FLOW_SIM_DEFAULTS["n_obs"])),
            float(block.get("noise_sd", FLOW_SIM_DEFAULTS["noise_sd"])),
            float(block.get("c_noise_sd", FLOW_SIM_DEFAULTS["c_noise_sd"])),
            int(block["seed"]),
        )
        out_path = out_path.with_suffix(".json")
        ds.to_json(out_path)
        return out_path
    if model == "normal_means":
        payload = _simulate_normal_means(block)
        out_path = out_path.with_suffix(".json")
        with open(out_path, "w") as fh:
            json.dump(payload, fh, sort_keys=True)
        return out_path
    if model == "latent_quadratic":
        payload = _simulate_latent_quadratic(block)
        out_path = out_path.with_suffix(".json")
        with open(out_path, "w") as fh:
            json.dump(payload, fh, sort_keys=True)
        return out_path
    if model == "procrustes":
        _write_procrustes_dataset(out_path, block)
        return out_path
    raise ValueError(f"unknown model {model}")


def _load_problem(model: str, data_path: Path, posterior: str, lam: float, barrier_t: float):
    """Build (problem, kernel_cfg, context) from a dataset on disk."""
    kcfg = KernelConfig(lam=lam, barrier_t=barrier_t)
    if model == "flow":
        ds = FlowDataset.from_json(data_path)
        base = flow_problem(ds.spec, FlowModelParams(), kcfg, ds)
        ctx = {"dataset": ds}
    elif model == "normal_means":
        with open(data_path) as fh:
            payload = json.load(fh)
        base = normal_means_problem(NormalMeansModel(tau=payload["tau"], y=np.array(payload["y"])))
        ctx = {"dataset": payload}
    elif model == "latent_quadratic":
        with open(data_path) as fh:
            payload = json.load(fh)
        model_obj = LatentQuadraticModel(x=np.array(payload["x"]), y=np.array(payload["y"]))
        base = latent_quadratic_problem(model_obj)
        ctx = {"dataset": payload, "model": model_obj}
    elif model == "procrustes":
        with open(Path(data_path) / "meta.json") as fh:
            meta = json.load(fh)
        X_list = tuple(
            np.loadtxt(Path(data_path) / name, delimiter=",") for name in meta["batches"]
        )
        labels = np.loadtxt(Path(data_path) / meta["labels"], delimiter=",").astype(int)
        model_obj = ProcrustesDualModel(X_list=X_list, labels=labels)
        base = procrustes_problem(model_obj)
        ctx = {"dataset": meta, "model": model_obj}
    else:
        raise ValueError(f"unknown model {model}")

    if posterior == "gradient_bridged":
        problem = base
    elif posterior == "gibbs_plain":
        problem = gibbs_baseline(base, "plain")
    elif posterior == "gibbs_joint":
        problem = gibbs_baseline(base, "joint_shrinkage", lam=lam)
    else:
        raise ValueError(f"unknown posterior {posterior}")
    ctx["base_problem"] = base
    return problem, kcfg, ctx


def _mass_pipeline(problem, kcfg, init, mass_choice: str, mode_max_iters: int):
    """MassSpec per the configured mode, with the mode/refine bookkeeping."""
    dim = init.shape[0]
    record = {"mass_choice": mass_choice}
    if mass_choice == "identity" or mass_choice == "default_diag":
        return MassSpec.identity(dim), mass_choice == "default_diag", record
    logpost, grad = posterior_callables(problem, kcfg)
    mode = find_posterior_mode(logpost, grad, init, max_iters=mode_max_iters, gtol=1e-3)
    record.update(
        mode_converged=bool(mode.converged),
        mode_grad_norm=float(mode.grad_norm),
        mode_n_evals=int(mode.n_grad_evals),
    )
    nb = problem.dim_beta
    beta_hat = mode.x[:nb]
    try:
        z_hat = refine_subproblem(problem, beta_hat, mode.x[nb:])
        r = problem.grad_h(beta_hat, z_hat, problem.data) if problem.dim_k else np.zeros(0)
        record["z_residual_norm"] = float(np.linalg.norm(r, ord=np.inf)) if r.size else 0.0
        if not np.all(np.isfinite(z_hat)):
            raise FloatingPointError("non-finite refined point")
        Jb = problem.hess_zbeta(beta_hat, z_hat, problem.data)
        Jz = problem.hess_zz(beta_hat, z_hat, problem.data)
        G_hat = np.concatenate([Jb.T, Jz.T], axis=0)
        if not np.all(np.isfinite(G_hat)):
            raise FloatingPointError("non-finite Hessian blocks")
        spec = build_mass_inverse(G_hat)
        record["mass_mode"] = spec.mode
        return spec, False, record
    except Exception as exc:  # total failure: fall back to identity mass
        record["mass_mode"] = "identity_fallback"
        record["fallback_reason"] = str(exc)
        return MassSpec.identity(dim), False, record


def _derived_quantities(model: str, chain, ctx) -> dict:
    out = {}
    if model == "flow":
        ds = ctx["dataset"]
        log_beta = chain.block("log_beta")
        out["beta"] = np.exp(log_beta)
        zfree = chain.block("z")
        out["z_edge"] = np.stack([reparameterize_flows(ds.spec, zf) for zf in zfree])
        out["sigma_y2"] = np.exp(chain.block("log_sigma_y2"))
        out["sigma_c2"] = np.exp(chain.block("log_sigma_c2"))
    elif model == "normal_means":
        if "log_beta" in dict(chain.layout.blocks):
            out["beta"] = np.exp(chain.block("log_beta"))
    elif model == "procrustes":
        mobj = ctx["model"]
        B, d, n = mobj.n_batches, mobj.d, mobj.n
        nb = d * n + B + 1
        errs = np.empty((chain.n_kept, B))
        from .models.procrustes import batch_rotations

        for i in range(chain.n_kept):
            Rs = batch_rotations(mobj, chain.samples[i, :nb], chain.samples[i, nb:])
            for b, R in enumerate(Rs):
                errs[i, b] = np.linalg.norm(R.T @ R - np.eye(d))
        out["orth_error"] = errs
        out["s"] = np.exp(chain.block("log_s"))
        out["sigma2"] = np.exp(chain.block("log_sigma2"))
    elif model == "latent_quadratic":
        out["tau"] = np.exp(chain.block("log_tau"))
        out["b"] = np.exp(chain.block("log_b"))
    return out


def _derived_matrix(derived: dict):
    names, cols = [], []
    for key, arr in derived.items():
        arr = np.atleast_2d(arr)
        if arr.shape[0] == 1:
            arr = arr.T
        for j in range(arr.shape[1]):
            names.append(key if arr.shape[1] == 1 else f"{key}_{j}")
            cols.append(arr[:, j])
    if not names:
        return [], np.zeros((0, 0))
    return names, np.stack(cols, axis=1)


def _metrics(model: str, chain, derived: dict, ctx, lam: float) -> dict:
    metrics = {"model": model, "lambda": lam}
    if model == "flow":
        ds = ctx["dataset"]
        beta = derived["beta"]
        z = derived["z_edge"]
        metrics.update(
            beta0=ds.beta0.tolist(),
            z0=ds.z0.tolist(),
            beta_mean=beta.mean(axis=0).tolist(),
            beta_sd=beta.std(axis=0, ddof=1).tolist(),
            beta_q5=np.percentile(beta, 5.0, axis=0).tolist(),
            beta_q95=np.percentile(beta, 95.0, axis=0).tolist(),
            z_mean=z.mean(axis=0).tolist(),
            z_sd=z.std(axis=0, ddof=1).tolist(),
        )
    elif model == "procrustes":
        mobj = ctx["model"]
        nb = mobj.d * mobj.n + mobj.n_batches + 1
        labels = np.asarray(mobj.labels)
        n_types = len(np.unique(labels))
        all_labels = np.tile(labels, mobj.n_batches)
        raw_pts = np.vstack([X.T for X in mobj.X_list])
        raw_batches = np.concatenate([np.full(mobj.n, b) for b in range(mobj.n_batches)])
        metrics["db_raw_full"] = davies_bouldin(raw_pts, raw_batches)
        metrics["db_raw_pc2"] = davies_bouldin(principal_components(raw_pts, 2), raw_batches)
        # point estimate: kept draw maximizing NMI of k-means clusters vs types
        from sklearn.cluster import KMeans

        best = (-1.0, 0)
        for i in range(chain.n_kept):
            pts, _ = aligned_representation(mobj, chain.samples[i, :nb], chain.samples[i, nb:])
            km = KMeans(n_clusters=n_types, n_init=4, random_state=0).fit(pts)
            nmi = normalized_mutual_information(km.labels_, all_labels)
            if nmi > best[0]:
                best = (nmi, i)
        metrics["nmi_best"] = best[0]
        metrics["point_estimate_index"] = best[1]
        pts, batches = aligned_representation(
            mobj, chain.samples[best[1], :nb], chain.samples[best[1], nb:]
        )
        metrics["db_aligned_full"] = davies_bouldin(pts, batches)
        metrics["db_aligned_pc2"] = davies_bouldin(principal_components(pts, 2), batches)
        errs = derived["orth_error"]
        metrics["orth_error_within_0.1"] = [float(np.mean(errs[:, b] <= 0.1)) for b in range(errs.shape[1])]
    elif model == "normal_means":
        if "beta" in derived:
            beta = derived["beta"][:, 0]
            metrics.update(beta_mean=float(beta.mean()), beta_sd=float(beta.std(ddof=1)))
    elif model == "latent_quadratic":
        metrics.update(
            tau_mean=float(derived["tau"].mean()), b_mean=float(derived["b"].mean())
        )
    return metrics


def _write_acf_csv(path, draws: np.ndarray, names, max_lag: int = 50) -> None:
    max_lag = min(max_lag, draws.shape[0] - 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter"] + [f"lag{k}" for k in range(max_lag + 1)])
        for j, name in enumerate(names):
            col = draws[:, j]
            if np.all(col == col[0]):
                acf = np.zeros(max_lag + 1)
                acf[0] = 1.0
            else:
                acf = autocorrelation(col, max_lag)
            w.writerow([name] + [f"{v:.10g}" for v in acf])


def _check_csv(path, expected_rows: int | None = None) -> None:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError(f"{path}: ragged rows")
    if expected_rows is not None and len(rows) - 1 != expected_rows:
        raise ValueError(f"{path}: expected {expected_rows} data rows, found {len(rows) - 1}")


def run_experiment(config: dict, output_dir=None, n_chains: int = 1) -> dict:
    """Run one configured experiment end to end; returns the manifest."""
    jsonschema.validate(config, CONFIG_SCHEMA)
    t_start = time.time()
    model = config["model"]
    posterior = config["posterior"]
    lam = float(config.get("lambda", 100.0))
    barrier_t = float(config.get("barrier_t", 1000.0))
    mass_choice = config.get("mass", "projection")
    outdir = Path(output_dir if output_dir is not None else config.get("output_dir", "run_output"))
    outdir.mkdir(parents=True, exist_ok=True)

    if "path" in config["data"]:
        data_path = Path(config["data"]["path"])
        if not data_path.exists():
            raise FileNotFoundError(f"dataset path {data_path} does not exist")
    else:
        data_path = simulate_dataset(model, config["data"]["simulate"], outdir / "dataset")

    problem, kcfg, ctx = _load_problem(model, data_path, posterior, lam, barrier_t)

    s_block = dict(config.get("sampler", {}))
    init_setting = s_block.pop("init", "auto")
    scfg = SamplerConfig(**s_block)
    if isinstance(init_setting, str) and init_setting == "auto":
        init = problem.init
        if init is None:
            raise ValueError("model provides no automatic initial point")
    else:
        init = np.asarray(init_setting, dtype=float)

    mass, adapt_mass, mass_record = _mass_pipeline(
        problem, kcfg, init, mass_choice, int(config.get("mode_max_iters", 400))
    )

    logpost, grad = posterior_callables(problem, kcfg)
    fused = posterior_value_and_grad(problem, kcfg)

    def one_chain(stream: int):
        cfg_c = replace(scfg, stream=stream, init=init)
        return nuts_sample(
            logpost, grad, cfg_c, mass,
            layout=problem.layout, adapt_mass=adapt_mass, value_and_grad=fused,
        )

    if n_chains == 1:
        chains = [one_chain(0)]
    else:
        with ThreadPoolExecutor(max_workers=n_chains) as pool:
            chains = list(pool.map(one_chain, range(n_chains)))

    files: dict = {"dataset": str(data_path)}
    chain_entries = []
    coord_names = problem.layout.coordinate_names()
    for c, ch in enumerate(chains):
        tag = "" if n_chains == 1 else f"_{c}"
        chain_csv = outdir / f"chain{tag}.csv"
        ch.to_csv(chain_csv)
        ch.write_sidecar(outdir / f"chain{tag}_meta.json")
        _check_csv(chain_csv, expected_rows=ch.n_kept)
        ess = np.array([effective_sample_size(ch.samples[:, j]) if ch.samples[:, j].std() > 0 else 0.0 for j in range(ch.dim)])
        chain_entries.append(
            {
                "n_kept": ch.n_kept,
                "n_grad_evals": int(ch.info["n_grad_evals"]),
                "divergence_count": int(ch.info["divergence_count"]),
                "quality_warning": bool(ch.info["quality_warning"]),
                "step_size_final": float(ch.info["step_size_final"]),
                "ess_median": float(np.median(ess)),
                "ess_per_grad": float(np.median(ess) / ch.info["n_grad_evals"]),
            }
        )
        files.setdefault("chain_csv", []).append(str(chain_csv))

    chain = chains[0]
    derived = _derived_quantities(model, chain, ctx)
    d_names, d_matrix = _derived_matrix(derived)

    summary = summarize_draws(chain.samples, coord_names)
    summary_csv = outdir / "summary.csv"
    summary.to_csv(summary_csv)
    _check_csv(summary_csv, expected_rows=chain.dim)
    files["summary_csv"] = str(summary_csv)

    if d_names:
        d_summary = summarize_draws(d_matrix, d_names)
        derived_csv = outdir / "derived_summary.csv"
        d_summary.to_csv(derived_csv)
        _check_csv(derived_csv, expected_rows=len(d_names))
        files["derived_summary_csv"] = str(derived_csv)
        draws_csv = outdir / "derived_draws.csv"
        with open(draws_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(d_names)
            for i in range(d_matrix.shape[0]):
                w.writerow([f"{v:.17g}" for v in d_matrix[i]])
        _check_csv(draws_csv, expected_rows=d_matrix.shape[0])
        files["derived_draws_csv"] = str(draws_csv)

    acf_csv = outdir / "acf.csv"
    _write_acf_csv(acf_csv, chain.samples, coord_names)
    _check_csv(acf_csv, expected_rows=chain.dim)
    files["acf_csv"] = str(acf_csv)

    metrics = _metrics(model, chain, derived, ctx, lam)
    jsonschema.validate(metrics, METRICS_SCHEMA)
    metrics_json = outdir / "metrics.json"
    with open(metrics_json, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
    files["metrics_json"] = str(metrics_json)

    manifest = {
        "config": config,
        "model": model,
        "posterior": posterior,
        "lambda": lam,
        "mass": mass_choice,
        "seed": int(scfg.seed),
        "n_chains": n_chains,
        "schedule": scfg.echo(),
        "mass_pipeline": mass_record,
        "chains": chain_entries,
        "ess_table": {name: float(effective_sample_size(chain.samples[:, j])) if chain.samples[:, j].std() > 0 else 0.0 for j, name in enumerate(coord_names)},
        "files": files,
        "wall_time_s": time.time() - t_start,
        "layout": [[name, size] for name, size in problem.layout.blocks],
    }
    jsonschema.validate(manifest, MANIFEST_SCHEMA)
    manifest_json = outdir / "manifest.json"
    with open(manifest_json, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    manifest["manifest_path"] = str(manifest_json)
    return manifest


def _load_summary_csv(path) -> dict:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["parameter"]] = {k: float(v) for k, v in row.items() if k != "parameter"}
    return out


def compare_runs(manifest_paths: list, output_path=None) -> dict:
    """Side-by-side per-parameter posterior sd and metric comparison."""
    manifests = []
    for p in manifest_paths:
        with open(p) as fh:
            manifests.append(json.load(fh))
    layouts = [tuple(tuple(b) for b in m["layout"]) for m in manifests]
    ref = layouts[0]
    for other, m in zip(layouts[1:], manifests[1:]):
        if other != ref:
            ours = dict(ref)
            theirs = dict(other)
            for name in set(ours) | set(theirs):
                if ours.get(name) != theirs.get(name):
                    raise ValueError(f"incompatible layouts: block {name!r} differs across runs")
            raise ValueError("incompatible layouts: block order differs across runs")

    runs = []
    sd_tables = []
    for m in manifests:
        entry = {
            "model": m["model"],
            "posterior": m["posterior"],
            "mass": m["mass"],
            "lambda": m["lambda"],
            "seed": m["seed"],
            "ess_median": m["chains"][0]["ess_median"],
            "n_grad_evals": m["chains"][0]["n_grad_evals"],
            "ess_per_grad": m["chains"][0]["ess_per_grad"],
            "divergence_count": m["chains"][0]["divergence_count"],
        }
        with open(m["files"]["metrics_json"]) as fh:
            entry["metrics"] = json.load(fh)
        key = "derived_summary_csv" if "derived_summary_csv" in m["files"] else "summary_csv"
        sd_tables.append(_load_summary_csv(m["files"][key]))
        runs.append(entry)

    params = sorted(set().union(*[set(t) for t in sd_tables]))
    sd_table = {
        name: [t.get(name, {}).get("sd") for t in sd_tables] for name in params
    }
    report = {"runs": runs, "posterior_sd": sd_table}
    if len(manifests) == 2:
        diffs = {
            name: abs(v[0] - v[1])
            for name, v in sd_table.items()
            if v[0] is not None and v[1] is not None
        }
        report["sd_abs_difference"] = diffs
        report["max_sd_abs_difference"] = max(diffs.values()) if diffs else 0.0
        report["ess_per_grad_ratio"] = runs[0]["ess_per_grad"] / max(runs[1]["ess_per_grad"], 1e-300)
    if output_path is not None:
        with open(output_path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    return report


def run_check(verbose: bool = True) -> bool:
    """Fast gradient / duality / oracle property suite (the `check` subcommand)."""
    results = []

    def record(name, ok, detail=""):
        results.append((name, ok))
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))

    rng = np.random.default_rng(0)

    # model-zoo gradient checks
    from .models.flow import BUNDLED_BETA0

    spec = bundled_network()
    ds = simulate_flow_data(spec, np.array(BUNDLED_BETA0), 40, 0.5, 0.5, seed=7)
    kcfg = KernelConfig(lam=100.0)
    fp = flow_problem(spec, FlowModelParams(), kcfg, ds)
    lp, gr = posterior_callables(fp, kcfg)
    ok = all(
        check_gradient(lp, gr, fp.init + 0.01 * rng.standard_normal(fp.init.shape), rtol=1e-5).passed
        for _ in range(5)
    )
    record("flow model gradient vs finite differences", ok)

    nm = normal_means_problem(NormalMeansModel(tau=1.0, y=rng.standard_normal(6)))
    lp, gr = posterior_callables(nm, KernelConfig(lam=5.0))
    ok = all(
        check_gradient(lp, gr, 0.5 * rng.standard_normal(7), rtol=1e-5).passed for _ in range(5)
    )
    record("normal means gradient vs finite differences", ok)

    from .models.procrustes import maximize_dual, procrustes_svd_solution

    ok = True
    for _ in range(5):
        beta_m = rng.standard_normal((3, 5))
        y_m = rng.standard_normal((3, 5))
        _, f_star = maximize_dual(beta_m, y_m)
        R_hat = procrustes_svd_solution(beta_m, y_m)
        ok = ok and abs(f_star - np.sum((R_hat @ y_m - beta_m) ** 2)) <= 1e-6
    record("Procrustes strong duality (dual ascent vs SVD primal)", ok)

    ok = True
    for _ in range(10):
        n = int(rng.integers(3, 8))
        edges = [(i, j) for i in range(n) for j in range(n) if i != j and rng.random() < 0.5]
        if not edges:
            continue
        spec_r = FlowNetworkSpec(
            nodes=tuple(range(n)), source=0, sink=n - 1,
            edges=tuple(edges), designed_capacity=tuple(1.0 for _ in edges), validate=False,
        )
        caps = rng.uniform(0, 4, size=len(edges))
        sol = max_flow(spec_r, caps)
        ok = ok and abs(sol.value - min_cut_by_enumeration(spec_r, caps)) < 1e-9
        ok = ok and verify_cut(spec_r, caps, sol)
    record("max-flow equals min-cut with verified certificates", ok)

    from .sampler import leapfrog_step

    prec = np.linalg.inv(np.array([[1.0, 0.4], [0.4, 1.5]]))
    grad_fn = lambda x: -prec @ x
    ok = True
    for _ in range(20):
        x0, p0 = rng.standard_normal(2), rng.standard_normal(2)
        x1, p1, _ = leapfrog_step(x0, p0, 0.1, np.eye(2), grad_fn)
        x2, p2, _ = leapfrog_step(x1, -p1, 0.1, np.eye(2), grad_fn)
        ok = ok and np.allclose(x2, x0, rtol=1e-12, atol=1e-13) and np.allclose(-p2, p0, rtol=1e-12, atol=1e-13)
    record("leapfrog reversibility", ok)

    from .models.flow import conservation_residual as cons_res

    ok = all(
        np.all(cons_res(spec, reparameterize_flows(spec, rng.uniform(-3, 3, 5))) == 0.0)
        for _ in range(50)
    )
    record("flow reparameterization conserves exactly", ok)

    passed = all(ok for _, ok in results)
    if verbose:
        print(f"{'ALL CHECKS PASSED' if passed else 'CHECK FAILURES PRESENT'} ({sum(o for _, o in results)}/{len(results)})")
    return passed


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gradbridge", description="Gradient-bridged posterior experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--output-dir", default=None)
    p_run.add_argument("--chains", type=int, default=1)

    p_sim = sub.add_parser("simulate", help="write the synthetic dataset for a config")
    p_sim.add_argument("config")
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--output-dir", default=None)

    p_cmp = sub.add_parser("compare", help="compare run manifests")
    p_cmp.add_argument("manifests", nargs="+")
    p_cmp.add_argument("--output-dir", default=None)

    sub.add_parser("check", help="run the gradient/duality/oracle property suite")

    args = parser.parse_args(argv)

    if args.command == "check":
        return 0 if run_check() else 1

    if args.command == "compare":
        out = Path(args.output_dir) / "comparison.json" if args.output_dir else None
        if out is not None:
            out.parent.mkdir(parents=True, exist_ok=True)
        report = compare_runs(args.manifests, out)
        print(json.dumps(report["runs"], indent=2, sort_keys=True))
        return 0

    with open(args.config) as fh:
        config = json.load(fh)
    if args.seed is not None:
        config.setdefault("sampler", {})["seed"] = args.seed
        if "simulate" in config.get("data", {}):
            config["data"]["simulate"]["seed"] = args.seed

    if args.command == "simulate":
        jsonschema.validate(config, CONFIG_SCHEMA)
        if "simulate" not in config["data"]:
            print("config has no simulation block", file=sys.stderr)
            return 2
        outdir = Path(args.output_dir or config.get("output_dir", "run_output"))
        outdir.mkdir(parents=True, exist_ok=True)
        path = simulate_dataset(config["model"], config["data"]["simulate"], outdir / "dataset")
        print(f"dataset written to {path}")
        return 0

    manifest = run_experiment(config, output_dir=args.output_dir, n_chains=args.chains)
    print(f"run complete: {manifest['manifest_path']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
