"""Band-limited adversarial deformations of triangle meshes."""
from .attacks import (AttackResult, GeneratorNet, c_search, evaluate_attacks, generator_forward,
                      optimize_attack, search_attack, train_generator)
from .classifier import ClassifierNet, augment, forward, predict, train_classifier
from .config import RunConfig
from .dataset import Dataset, generate_synthetic, ingest_directory
from .mesh import Mesh, icosphere, load_mesh, save_mesh
from .spectral import SpectralBasis, eigendecompose, laplacian_operators, mesh_basis

__version__ = "0.1.0"

__all__ = [
    "AttackResult", "ClassifierNet", "Dataset", "GeneratorNet", "Mesh", "RunConfig",
    "SpectralBasis", "augment", "c_search", "eigendecompose", "evaluate_attacks", "forward",
    "generate_synthetic", "generator_forward", "icosphere", "ingest_directory",
    "laplacian_operators", "load_mesh", "mesh_basis", "optimize_attack", "predict",
    "save_mesh", "search_attack", "train_classifier", "train_generator",
]
