"""
From a field to a clean mesh
============================

The coarse grid tells us which blocks contain the surface; only those are
evaluated at full resolution. The result is identical to dense evaluation
at a fraction of the cost. Marching cubes, floater removal and quadric
decimation finish the job.
"""
import numpy as np

from shapetok.extract import GridSpec, decimate, extract, remove_floaters
from shapetok.geom import icosphere, random_shape, write_obj

spec = random_shape("torus", 0)
for N in (64, 128):
    grid = GridSpec(N, N // 8)
    mesh, stats = extract(spec.sdf, grid)
    dense, _ = extract(spec.sdf, grid, hierarchical=False)
    same = np.array_equal(mesh.triangles, dense.triangles) and np.array_equal(mesh.vertices, dense.vertices)
    print(f"N={N}: {stats.fine_evals} of {stats.dense_evals} evaluations "
          f"({stats.fine_evals / stats.dense_evals:.1%}), identical to dense: {same}")

mesh, _ = extract(spec.sdf, GridSpec(64, 8))
print("watertight:", mesh.is_watertight(), " euler characteristic:", mesh.euler_characteristic())

# plant a speck of junk, then remove it
speck = icosphere(1, 0.02).transformed(offset=(0.95, 0.95, 0.95))
junk = type(mesh)(np.r_[mesh.vertices, speck.vertices], np.r_[mesh.triangles, speck.triangles + len(mesh.vertices)])
print("faces with speck:", junk.n_faces, "-> cleaned:", remove_floaters(junk).n_faces)

small = decimate(mesh, 2000)
print("decimated:", mesh.n_faces, "->", small.n_faces, "faces")
write_obj(small, "torus.obj")
print("wrote torus.obj")
