"""Geometric grasp evaluation, synthetic benchmark scenes and the ablation harness."""
