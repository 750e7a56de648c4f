"""Shared plumbing for the scenario demos: a 4-service chain wired to an in-process hcsd."""

from contextlib import contextmanager

from hcs.daemon import Hcsd
from hcs.sim_mesh import MeshSpec, spawn_mesh


@contextmanager
def chain_with_hcsd(seed=1, **hcsd_kw):
    mesh = spawn_mesh(MeshSpec.chain("D", "C", "B", "A"), seed=seed)
    hcsd = Hcsd(mesh.dependency_graph(), **hcsd_kw).serve()
    mesh.attach_agents(hcsd.url)
    try:
        yield mesh, hcsd
    finally:
        hcsd.stop()
        mesh.stop()
