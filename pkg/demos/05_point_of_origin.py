"""
Relapse points of origin by iterative erosion
=============================================

Each connected relapse component is eroded with a full 3x3x3 structuring
element until the next erosion would remove everything; the rounded
centroid of the survivors approximates the component's centre of volume.
A prediction "captures" a relapse if it contains that voxel.
"""

import numpy as np

from lrrseg import analysis
from lrrseg.volgrid import Grid3D, Mask3D

grid = Grid3D((20, 20, 20), (1.0, 1.0, 1.0))


def show(name, fg):
    po = analysis.point_of_origin(fg, grid)
    print(f"{name:<28} PO voxel {po.voxel}  ({int(fg.sum())} voxels)")


cube = np.zeros((20, 20, 20), dtype=bool)
cube[4:7, 4:7, 4:7] = True
show("3x3x3 cube", cube)

single = np.zeros((20, 20, 20), dtype=bool)
single[10, 3, 17] = True
show("single voxel", single)

bar = np.zeros((20, 20, 20), dtype=bool)
bar[8:11, 8:11, 5:12] = True  # 7 voxels long in x
show("7x3x3 bar", bar)

# An L-shaped component: the centroid of the erosion survivors can fall
# outside the mask, in which case the nearest surviving voxel is used.
ell = np.zeros((20, 20, 20), dtype=bool)
ell[2:12, 2:5, 2:5] = True
ell[2:5, 2:5, 2:12] = True
show("L-shaped component", ell)

# Multi-component masks get one PO per connected component.
multi = np.zeros((20, 20, 20), dtype=np.uint8)
multi[3:6, 3:6, 3:6] = 1
multi[14:17, 14:17, 14:17] = 1
mask = Mask3D(grid, multi)
print()
for po in analysis.points_of_origin(mask):
    print(f"component {po.label}: PO {po.voxel} at {po.position_mm} mm")

pred = Mask3D(grid, (multi * (np.indices((20, 20, 20))[0] < 10)).astype(np.uint8))
included, total = analysis.po_inclusion(pred, analysis.points_of_origin(mask))
print(f"\na prediction covering only the lower half captures {included} of {total} POs")
