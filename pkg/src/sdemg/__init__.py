"""ECG interference removal from single-channel sEMG with a conditional diffusion model."""

from .ingest import SurrogateSpec, Waveform, gen_surrogate, read_segments, read_wfdb, write_segments
from .schedules import NoiseSchedule, cosine_schedule, draw_alpha_bar

__version__ = "0.1.0"
