"""Cross-diffusion attention on two toy similarity matrices.

Shows how the blend weight eps moves S_rd between the plain affinity average
(eps = 0) and the pure diffusion product (eps = 1), and that no cross-modal
feature dot product is ever taken.
"""
import numpy as np

from mutualformer.attention import CdaConfig, cross_diffusion_attention

s_r = np.eye(2)
s_d = np.full((2, 2), 0.5)
v_r = np.array([[1.0, 0.0], [0.0, 1.0]])
v_d = np.array([[2.0, 0.0], [0.0, 2.0]])

for eps in (0.0, 0.5, 1.0):
    rd, dr = cross_diffusion_attention(s_r, s_d, v_r, v_d, CdaConfig(eps, diagnostic=True))
    print(f"eps = {eps}")
    print("  S_rd =", rd.similarity.data.tolist())
    print("  M_rd =", rd.mixed.data.tolist())
