"""Union of a main branch and a side branch into one watertight surface."""

from angiorecon.phantom import Bifurcation, PhantomSpec, default_view_pair, generate
from angiorecon.reconstruct import initial_mesh
from angiorecon.stitch import BranchSet, cap_tube, stitch_branches

spec = PhantomSpec(kind="straight", length=40.0, base_radius=2.0, views=default_view_pair(),
                   bifurcation=Bifurcation(branch_point=0.5, angle=50.0, radius=1.4, length=18.0, roll=30.0))
case = generate(spec)

# Each branch gets its own mesh initialisation from the shared masks.
main = initial_mesh(case.masks, case.geometries, case.soi)
side = initial_mesh(case.masks, case.geometries, case.side.soi)
print("main tube open edges:", cap_tube(main.mesh).boundary_edges().shape[0], "after capping")

# The side branch is moved so its first centerline point touches the main
# centerline, then both are voxelized, OR-ed and re-meshed by marching cubes.
stitched = stitch_branches(BranchSet(main.mesh, main.centerline, [(side.mesh, side.centerline)]), resolution=160)
print(f"stitched: {len(stitched.vertices)} vertices, {len(stitched.faces)} triangles")
print(f"watertight {stitched.is_watertight()}, components {stitched.n_components()}, "
      f"Euler characteristic {stitched.euler_characteristic()}, volume {stitched.volume():.1f} mm^3")
