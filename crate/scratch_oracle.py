"""Oracle: achievable denoising losses on the 5-carrier linear target.

Computes, by Monte Carlo with exact mixture posteriors:
  L_floor  = loss of the *ideal* predictor of the target distribution
  L_base   = loss of the *ideal* predictor of the base 25-mode distribution,
             evaluated on target data (the starting loss of customization
             if the base model were perfect)
Also the same pair for the four-peak world / single-carrier target.
"""
import numpy as np

rng = np.random.default_rng(0)

T = 1000
beta = np.linspace(1e-4, 0.02, T)
alpha_bar = np.cumprod(1 - beta)

def ab(t):  # t in 1..T
    return alpha_bar[t - 1]

# Mixture machinery: isotropic components (mu_i, sigma_i), weights w_i.
def ideal_eps(z, t, mus, sigma2s, ws):
    """E[eps | z_t] for data ~ mixture of isotropic Gaussians."""
    a = ab(t)
    # z_t | comp i ~ N(sqrt(a) mu_i, a sigma2_i + 1 - a)
    var = a * sigma2s + (1 - a)
    d2 = ((z[None, :] - np.sqrt(a) * mus) ** 2).sum(axis=1)
    logp = np.log(ws) - d2 / (2 * var) - np.log(var)
    logp -= logp.max()
    p = np.exp(logp)
    p /= p.sum()
    # E[z0|z_t, comp i] via Gaussian conditioning:
    #   post mean_i = mu_i + (sqrt(a) sigma2_i / var_i) (z - sqrt(a) mu_i)
    coef = np.sqrt(a) * sigma2s / var
    ez0 = (mus + coef[:, None] * (z[None, :] - np.sqrt(a) * mus))
    ez0 = (p[:, None] * ez0).sum(axis=0)
    return (z - np.sqrt(a) * ez0) / np.sqrt(1 - a)

def loss(data_sampler, mus, sigma2s, ws, n=40000):
    tot = 0.0
    for _ in range(n):
        x0 = data_sampler()
        t = rng.integers(1, T + 1)
        eps = rng.standard_normal(2)
        z = np.sqrt(ab(t)) * x0 + np.sqrt(1 - ab(t)) * eps
        e_hat = ideal_eps(z, t, mus, sigma2s, ws)
        tot += ((eps - e_hat) ** 2).sum()
    return tot / n

# Grid25 world.
grid = np.array([[x, y] for y in (-4, -2, 0, 2, 4) for x in (-4, -2, 0, 2, 4)], float)
carriers = grid[[0, 6, 12, 18, 24]]
seg_a, seg_b = np.array([-0.4, -0.4]), np.array([0.4, 0.4])
jitter = 0.05

def sample_target():
    c = carriers[rng.integers(len(carriers))]
    u = rng.random()
    return c + seg_a + u * (seg_b - seg_a) + jitter * rng.standard_normal(2)

# Target as a fine mixture: 80 points per segment x 5 carriers, sigma=jitter.
K = 80
ts = (np.arange(K) + 0.5) / K
seg_pts = seg_a + ts[:, None] * (seg_b - seg_a)
target_mus = np.concatenate([c + seg_pts for c in carriers])
target_sig2 = np.full(len(target_mus), jitter**2)
target_w = np.full(len(target_mus), 1 / len(target_mus))

base_mus = grid
base_sig2 = np.full(25, 0.15**2)
base_w = np.full(25, 0.04)

L_floor = loss(sample_target, target_mus, target_sig2, target_w)
L_base = loss(sample_target, base_mus, base_sig2, base_w)
print(f"grid25: L_floor={L_floor:.4f}  L_base_on_target={L_base:.4f}  ratio={L_floor/L_base:.3f}")

# Four-peak world, carrier = concept A's single mode.
fp = np.array([[-2.0, 2.0]])
def sample_target_fp():
    u = rng.random()
    return fp[0] + seg_a + u * (seg_b - seg_a) + jitter * rng.standard_normal(2)
t_mus_fp = fp[0] + seg_pts
t_sig2_fp = np.full(len(t_mus_fp), jitter**2)
t_w_fp = np.full(len(t_mus_fp), 1 / len(t_mus_fp))
base_mus_fp = fp
base_sig2_fp = np.array([0.15**2])
base_w_fp = np.array([1.0])

Lf = loss(sample_target_fp, t_mus_fp, t_sig2_fp, t_w_fp)
Lb = loss(sample_target_fp, base_mus_fp, base_sig2_fp, base_w_fp)
print(f"four-peak A: L_floor={Lf:.4f}  L_base_on_target={Lb:.4f}  ratio={Lf/Lb:.3f}")
