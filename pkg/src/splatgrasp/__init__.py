"""Differentiable articulated Gaussian splatting for hand grasp-pose refinement."""
