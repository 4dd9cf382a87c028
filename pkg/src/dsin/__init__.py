"""Deep image compression with side information available only at the decoder."""
from .codec import AutoEncoder, CodecConfig
from .bitstream import Bitstream, compress_file, decompress_file
from .metrics import QualityReport, ms_ssim
from .model import DSIN, ModelConfig, load_checkpoint, save_checkpoint
from .si_finder import MatcherConfig, find_assignment, synthesize
from .si_net import SiNet, SiNetConfig

__version__ = "0.1.0"

__all__ = [
    "AutoEncoder", "CodecConfig", "Bitstream", "compress_file", "decompress_file", "QualityReport", "ms_ssim",
    "DSIN", "ModelConfig", "load_checkpoint", "save_checkpoint", "MatcherConfig", "find_assignment",
    "synthesize", "SiNet", "SiNetConfig",
]
