"""Figure rendering for the report stage.

matplotlib is imported lazily and only here; the computational modules stay
plot-free.  Figures are rendered from the already-computed data and written
as PNG files alongside the delimited outputs.
"""

import os

import numpy as np


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def render_all(outdir, cfg=None, field=None, grad=None, subs=None,
               mesh=None, ends=None, window=None):
    made = []
    if field is not None:
        made.append(solution_surface(outdir, field))
    if grad is not None and subs is not None:
        made.append(slope_plane(outdir, cfg, grad, subs, window))
    if ends:
        made.append(end_fits(outdir, ends))
        made.append(divergence_profiles(outdir, ends))
    if mesh is not None:
        made.append(mesh_residuals(outdir, mesh))
    return [p for p in made if p]


def solution_surface(outdir, field):
    plt = _plt()
    pts = field.grid.points
    fig, ax = plt.subplots(figsize=(5.2, 4.4))
    t = ax.tricontourf(pts[:, 0], pts[:, 1], field.values, levels=24, cmap="viridis")
    fig.colorbar(t, ax=ax, label="potential")
    poly = np.vstack([field.grid.cfg.points, field.grid.cfg.points[:1]])
    ax.plot(poly[:, 0], poly[:, 1], "k-", lw=1)
    ax.set_aspect("equal")
    ax.set_xlabel("u1")
    ax.set_ylabel("u2")
    ax.set_title("convex potential")
    path = os.path.join(outdir, "fig_solution.png")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def slope_plane(outdir, cfg, grad, subs, window):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5.2, 4.8))
    y = grad.samples
    ax.plot(y[:, 0], y[:, 1], ".", ms=1.2, color="#2060c0", alpha=0.4,
            label="gradient image")
    for s in subs:
        poly = s.clipped_polygon
        if len(poly) >= 3:
            closed = np.vstack([poly, poly[:1]])
            ax.plot(closed[:, 0], closed[:, 1], "-", lw=1.0, color="#c03020")
        for apex, d in s.wedge.rays():
            far = apex + 3.0 * cfg.diameter * d
            ax.plot([apex[0], far[0]], [apex[1], far[1]], "--", lw=0.7,
                    color="#808080")
    r = 2.5 * cfg.diameter
    ax.set_xlim(-r, r)
    ax.set_ylim(-r, r)
    ax.set_aspect("equal")
    ax.set_xlabel("y1")
    ax.set_ylabel("y2")
    ax.set_title("slope plane: gradient image and vertex subgradient sets")
    path = os.path.join(outdir, "fig_slope_plane.png")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def end_fits(outdir, ends):
    plt = _plt()
    fig, axes = plt.subplots(1, 2, figsize=(8.6, 3.8))
    for e in ends:
        prof = np.asarray(e.normal_divergence_profile)
        axes[0].loglog(prof[:, 1], prof[:, 0], "o-", ms=3,
                       label=f"edge {e.edge_index}")
        fit = e.exp_decay_fit
        if fit.get("gamma") is not None:
            lo, hi = fit["window"]
            rr = np.linspace(lo, hi, 32)
            axes[1].semilogy(rr, fit["constant"] * np.exp(-fit["gamma"] * rr),
                             "-", lw=1, label=f"edge {e.edge_index} "
                             f"(gamma={fit['gamma']:.2f})")
    axes[0].set_xlabel("|y1| (outward normal gradient)")
    axes[0].set_ylabel("distance to edge u1")
    axes[0].set_title("end decay: u1 against |y1|")
    axes[0].legend(fontsize=7)
    axes[1].set_xlabel("distance along end")
    axes[1].set_ylabel("tail energy fit")
    axes[1].set_title("exponential tail fits")
    axes[1].legend(fontsize=7)
    path = os.path.join(outdir, "fig_end_fits.png")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def divergence_profiles(outdir, ends):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(4.8, 3.8))
    for e in ends:
        prof = np.asarray(e.normal_divergence_profile)
        ax.semilogx(prof[:, 0], prof[:, 1], "o-", ms=3, label=f"edge {e.edge_index}")
    ax.set_xlabel("distance to edge")
    ax.set_ylabel("outward normal gradient")
    ax.set_title("normal gradient divergence toward the edges")
    ax.legend(fontsize=7)
    path = os.path.join(outdir, "fig_divergence.png")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def mesh_residuals(outdir, mesh):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5.2, 4.4))
    cen = mesh.vertices[mesh.faces].mean(axis=1)
    sc = ax.scatter(cen[:, 0], cen[:, 1], c=np.log10(mesh.det_defect + 1e-12),
                    s=4, cmap="magma")
    fig.colorbar(sc, ax=ax, label="log10 det defect")
    ax.set_aspect("equal")
    ax.set_xlabel("u1")
    ax.set_ylabel("u2")
    ax.set_title("gradient-graph determinant defect")
    path = os.path.join(outdir, "fig_mesh_residuals.png")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
