"""
Simulate -> fit -> evaluate: the three estimators side by side
==============================================================

Reproduces the desk-scale benchmark: full-tensor voxels at SNR 15 on a
six-shell protocol, fitted by WLS, constrained WLS and EM maximum
likelihood, then scored against the generating truth.
"""

import numpy as np

import dkimle as dk
from dkimle.metrics import evaluate

N_VOXELS = 12
SNR = 15.0
SEED = 2

protocol, rows, truths = dk.scenario("dataset2", snr=SNR, seed=SEED, n_voxels=N_VOXELS)
print(f"simulated {N_VOXELS} voxels, m = {protocol.m} acquisitions, SNR {SNR}")
print(f"mean ground-truth MD: "
      f"{np.mean([dk.mean_diffusivity(t.theta_d) for t in truths]) * 1e3:.3f} x1e-3 mm^2/s\n")

reports = {}
for estimator in ("wls", "cwls", "mle"):
    fits = [dk.fit_voxel(rows[i], protocol, estimator) for i in range(N_VOXELS)]
    reports[estimator] = evaluate(fits, truths)

header = f"{'':6s}{'MD-MSE':>12s}{'FA-MSE':>10s}{'MK-MSE':>10s}{'Kperp-MSE':>11s}{'DT-MSE':>12s}{'KT-MSE':>10s}{'viol#2 %':>10s}{'s/voxel':>9s}"
print(header)
for est, rep in reports.items():
    print(f"{est:6s}{rep.mse['md']:12.3e}{rep.mse['fa']:10.4f}{rep.mse['mk']:10.4f}"
          f"{rep.mse['k_perp']:11.4f}{rep.mse['dt']:12.3e}{rep.mse['kt']:10.4f}"
          f"{rep.violation_pct['kurtosis_negative']:10.1f}{rep.runtime['mean']:9.3f}")

print("""
Reading the table: the unconstrained log-linear fit (wls) is fast but a
large share of its voxels carry a negative directional kurtosis
somewhere (violation column), which wrecks its kurtosis statistics. The
constrained fits can never violate positivity, and the Rician
maximum-likelihood estimator wins on the kurtosis metrics because the
high-b shells sit near the noise floor where log-domain fitting is
biased.""")

# the noiseless limit: every estimator collapses onto the truth
gt = truths[0]
clean = dk.simulate_voxel(gt, protocol, 1.0, 1e-9, np.random.default_rng(0))
print("noiseless limit, relative tensor errors:")
for estimator in ("wls", "cwls", "mle"):
    fit = dk.fit_voxel(clean, protocol, estimator)
    err = np.linalg.norm(fit.theta_w - gt.theta_w) / np.linalg.norm(gt.theta_w)
    print(f"  {estimator:5s}: {err:.2e}")
