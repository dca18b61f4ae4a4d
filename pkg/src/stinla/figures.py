"""Report figures written next to the delimited outputs.

Rendering is headless (Agg backend) and every function returns the paths it
wrote so callers can list them.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def fit_figures(out_dir, trace, spec, latent_mean, latent_sd):
    """Convergence trace and posterior latent-field panels."""
    paths = []

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    iterations = [rec.iteration for rec in trace]
    axes[0].plot(iterations, [rec.f for rec in trace], marker="o", ms=3)
    axes[0].set_xlabel("iteration")
    axes[0].set_ylabel("objective")
    axes[1].semilogy(iterations, [rec.grad_norm for rec in trace], marker="o", ms=3)
    axes[1].set_xlabel("iteration")
    axes[1].set_ylabel("gradient max-norm")
    fig.tight_layout()
    trace_path = out_dir / "trace.png"
    fig.savefig(trace_path, dpi=150)
    plt.close(fig)
    paths.append(trace_path)

    n_v, n_s, n_t = spec.n_processes, spec.n_spatial, spec.n_time
    per = spec.latent_per_process
    fig, axes = plt.subplots(n_v, 2, figsize=(8, 2.4 * n_v), squeeze=False)
    for v in range(n_v):
        field_mean = latent_mean[v * per : v * per + n_s * n_t].reshape(n_t, n_s)
        field_sd = latent_sd[v * per : v * per + n_s * n_t].reshape(n_t, n_s)
        for col, (field, label) in enumerate(
            [(field_mean, "posterior mean"), (field_sd, "posterior sd")]
        ):
            ax = axes[v][col]
            im = ax.imshow(field, aspect="auto", origin="lower", cmap="viridis")
            ax.set_xlabel("space")
            ax.set_ylabel("time")
            ax.set_title(f"process {v}: {label}", fontsize=9)
            fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    latent_path = out_dir / "latent.png"
    fig.savefig(latent_path, dpi=150)
    plt.close(fig)
    paths.append(latent_path)
    return paths


def benchmark_figure(out_dir, rows):
    """Total seconds per routine against the partition count, one line per
    load-balance factor."""
    routines = sorted({row["routine"] for row in rows})
    lbs = sorted({row["lb"] for row in rows})
    fig, axes = plt.subplots(1, len(routines), figsize=(3.2 * len(routines), 3.0), squeeze=False)
    for ax, routine in zip(axes[0], routines):
        for lb in lbs:
            per_p = {}
            for row in rows:
                if row["routine"] == routine and row["lb"] == lb:
                    per_p[row["P"]] = per_p.get(row["P"], 0.0) + row["seconds"]
            if not per_p:
                continue
            ps = sorted(per_p)
            ax.plot(ps, [per_p[p] for p in ps], marker="o", ms=3, label=f"lb={lb:g}")
        ax.set_title(routine, fontsize=9)
        ax.set_xlabel("partitions")
        ax.set_ylabel("seconds")
        ax.legend(fontsize=7)
    fig.tight_layout()
    path = out_dir / "benchmark.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return [path]


def prediction_figure(out_dir, values):
    fig, ax = plt.subplots(figsize=(6, 2.8))
    ax.plot(np.asarray(values), lw=0.8)
    ax.set_xlabel("prediction row")
    ax.set_ylabel("predicted mean")
    fig.tight_layout()
    path = out_dir / "predictions.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return [path]
