import numpy as np

from lidoscore import synth
from conftest import DATA


def test_fixtures_regenerate_identically(tmp_path):
    synth.write_fixtures(tmp_path, seed=2024)
    for p in sorted(tmp_path.iterdir()):
        assert p.read_bytes() == (DATA / p.name).read_bytes(), p.name


def test_world_is_seeded():
    a, b = synth.make_world(3), synth.make_world(3)
    assert np.array_equal(a.occ_cuts, b.occ_cuts) and a.states == b.states
    assert not np.array_equal(a.occ_cuts, synth.make_world(4).occ_cuts)


def test_population_structure():
    world = synth.make_world(1)
    pop = synth.draw_population(world, 3000, 7)
    assert len(pop) == 3000 and len({r.record_id for r in pop}) == 3000
    occs = {int(r.occupation) for r in pop}
    assert min(occs) >= 100 and max(occs) < 100 + world.config.n_occupations
    assert all(r.industry == str((int(r.occupation) - 100) % 6) for r in pop)
    assert all(r.earnings > 0 and 18 <= r.age <= 64 for r in pop)
    female = np.mean([r.sex == "female" for r in pop])
    assert abs(female - 0.3) < 0.03
