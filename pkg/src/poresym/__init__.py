"""Space-group equivariant parameter sharing for porous crystal property
prediction: symmetry-derived weight-sharing patterns, pore-augmented crystal
graphs, and a small self-contained training stack."""

from importlib import resources

from .crystal import (
    Lattice,
    SpaceGroup,
    SymOp,
    SiteSet,
    close_group,
    min_image_distance,
    orbit_of_point,
    induced_site_permutation,
    wrap_fractional,
)
from .coloring import SharingPattern, build_pattern, validate_pattern
from .graphs import (
    CrystalGraph,
    Framework,
    Occupancy,
    Pore,
    RbfConfig,
    build_graph,
    derive_bonds,
    rbf_embed,
)
from .model import (
    Model,
    ModelConfig,
    NodeStates,
    count_parameters,
    equivariance_check,
    forward,
    init_model,
    message_step,
    train,
)
from .data import (
    Dataset,
    LabeledConfig,
    SynthOracle,
    load_configurations,
    load_framework,
    make_synth_oracle,
    split_dataset,
    synth_generate,
    write_configurations,
)

__version__ = "0.1.0"


def framework_path(name):
    """Path to a framework file shipped with the package (e.g. 'MOR', 'MFI')."""
    return resources.files("poresym.frameworks").joinpath(f"{name.lower()}.txt")
