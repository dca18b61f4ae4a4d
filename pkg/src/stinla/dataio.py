"""File interchange: Matrix Market for sparse matrices, CSV for vectors and
tables, JSON for posterior summaries."""

import csv
import json

import numpy as np
import scipy.sparse as sp
from scipy.io import mmread, mmwrite


def read_sparse(path):
    """Matrix Market coordinate file as canonical CSR."""
    mat = sp.csr_matrix(mmread(str(path)))
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def write_sparse(path, matrix, comment=""):
    mmwrite(str(path), sp.coo_matrix(matrix), comment=comment)


def read_vector(path):
    """Single-column CSV (no header) as a float vector."""
    return np.loadtxt(str(path), dtype=np.float64, ndmin=1)


def write_vector(path, values):
    np.savetxt(str(path), np.asarray(values, dtype=np.float64), fmt="%.17g")


def write_table(path, header, rows):
    """Plain CSV with one header row; floats serialized via repr for
    round-trip fidelity."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(value) for value in row])


def _cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def write_latent_csv(path, spec, mean, sd):
    """Latent summary rows: index, process, time, space, mean, sd.

    Fixed-effect rows carry time -1 and the effect index in the space column.
    """
    per = spec.latent_per_process
    rows = []
    for idx in range(spec.joint_dim):
        process, local = divmod(idx, per)
        if local < spec.n_spatial * spec.n_time:
            t, s = divmod(local, spec.n_spatial)
        else:
            t, s = -1, local - spec.n_spatial * spec.n_time
        rows.append((idx, process, t, s, mean[idx], sd[idx]))
    write_table(path, ["index", "process", "time", "space", "mean", "sd"], rows)


def write_summary_json(path, summary, extra=None):
    """Posterior summary as a structured JSON document."""
    doc = {
        "theta_mode": summary.theta_mode.values.tolist(),
        "theta_names": summary.theta_mode.names(),
        "theta_sd": np.asarray(summary.theta_sd).tolist(),
        "logpost_at_mode": summary.logpost_at_mode,
        "iterations": summary.iterations,
        "f_evals": summary.f_evals,
        "status": summary.status,
        "latent_dim": int(summary.latent_mean.size),
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as handle:
        json.dump(doc, handle, indent=2, sort_keys=True)
        handle.write("\n")


def read_summary_json(path):
    with open(path) as handle:
        return json.load(handle)
