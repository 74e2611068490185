from .config import DECODERS, ModelConfig, toy_config
from .encoder import Encoder, FeaturePyramid
from .pose import MSPFE, JointRegressor2D
from .ppvl import PPVL, LiftMatrix, build_ppvl_matrix, load_skinning_file, random_lift_matrix
from .stmr import STMR
from .transformer import (SWMSA, DepthwiseMixer, MeshRegressor, SpiralConvMixer, SpiralTransformerBlock,
                          positional_encoding)

__all__ = [
    "DECODERS", "DepthwiseMixer", "Encoder", "FeaturePyramid", "JointRegressor2D", "LiftMatrix", "MSPFE",
    "MeshRegressor", "ModelConfig", "PPVL", "STMR", "SWMSA", "SpiralConvMixer", "SpiralTransformerBlock",
    "build_ppvl_matrix", "load_skinning_file", "positional_encoding", "random_lift_matrix", "toy_config",
]
