"""Expected pooled residual std for the translation-noise study.

Independent re-implementation with numpy: random probe poses, image points,
Gaussian noise on the marker translation, Kabsch fit, pooled per-pair
residual norms. Prints the sample std per sigma (N = 20 frames, 400 trials).
"""

import numpy as np


def rot(axis, angle):
    a = np.asarray(axis, float)
    a /= np.linalg.norm(a)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * k @ k


def kabsch(p, q):
    pc, qc = p.mean(0), q.mean(0)
    h = (p - pc).T @ (q - qc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1, 1, d]) @ u.T
    return r, qc - r @ pc


def trial(rng, sigma, n=20):
    r_um, t_um = rot([0.3, 1, 0.2], 0.4), np.array([12.0, -25, 80])
    r_pc, t_pc = rot([1, 0.1, 0], 2.8), np.array([-40.0, 30, 480])
    x_c = r_pc @ np.array([40.0, 35, 12]) + t_pc
    p, q = [], []
    for _ in range(n):
        r = rot([1, 0, 0], rng.uniform(-0.5, 0.5)) @ rot([0, 1, 0], rng.uniform(-0.5, 0.5)) @ rot([0, 0, 1], 0.3)
        pk = np.array([rng.uniform(20, 60), rng.uniform(20, 50), 0.0])
        t = x_c - r @ (r_um @ pk + t_um)
        t_noisy = t + rng.normal(0, sigma, 3)
        p.append(pk)
        q.append(r.T @ (x_c - t_noisy))
    p, q = np.array(p), np.array(q)
    r, t = kabsch(p, q)
    return np.linalg.norm(p @ r.T + t - q, axis=1)


def main():
    rng = np.random.default_rng(11)
    for sigma in [0.5, 1.0, 2.0]:
        pooled = np.concatenate([trial(rng, sigma) for _ in range(400)])
        print(f"sigma {sigma}: residual std {pooled.std(ddof=1):.4f}")


if __name__ == "__main__":
    main()
