# License AGPL-3.0 or later (http://www.gnu.org/licenses/agpl)
"""Synthetic labeled IQ frames with channel impairments.

A frame is a unit-power modulated burst passed through
``x[k] = (s * h)[k] + n[k]``: sample-rate offset, carrier offset, a short
multipath (selective fading) filter and complex white Gaussian noise.
"""

import enum
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import signal as sps_signal

from .exceptions import ConfigurationError, ContractError

_logger = logging.getLogger(__name__)

FRAME_LENGTH = 128
SAMPLES_PER_SYMBOL = 8
ROLLOFF = 0.35
RRC_SPAN = 8
GFSK_BT = 0.35
FSK_INDEX = 0.5
AUDIO_CUTOFF = 0.15
AUDIO_TAPS = 65
WBFM_DEVIATION = 0.1
AM_DEPTH = 0.5
SNR_GRID = tuple(range(-20, 20, 2))
# amplitude gains of the 0 / -3 / -6 dB taps at delays 0, 1, 2
DEFAULT_FADING = (
    (1.0, 0),
    (10 ** (-3 / 20), 1),
    (10 ** (-6 / 20), 2),
)


class ModulationScheme(enum.IntEnum):
    BPSK = 0
    QPSK = 1
    PSK8 = 2
    QAM16 = 3
    QAM64 = 4
    PAM4 = 5
    GFSK = 6
    CPFSK = 7
    WBFM = 8
    AM_DSB = 9
    AM_SSB = 10

    @property
    def is_analog(self):
        return self in (ModulationScheme.WBFM, ModulationScheme.AM_DSB, ModulationScheme.AM_SSB)

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        if isinstance(value, int):
            return cls(value)
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ConfigurationError(f"unknown modulation scheme {value!r}") from None


class Split(str, enum.Enum):
    TINY_TRAIN = "tiny_train"
    TINY_TEST = "tiny_test"
    TINY_ADV = "tiny_adv"
    ADV_DATA = "adv_data"

    @property
    def stream_id(self):
        return list(Split).index(self)


def rng_stream(*keys):
    """Counter-based generator keyed by a tuple of non-negative integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(keys))))


def _normalize(x):
    power = np.mean(np.abs(x) ** 2)
    if power == 0:
        return x
    return x / np.sqrt(power)


def constellation(scheme):
    """Unit average power symbol alphabet of a linear digital scheme."""
    scheme = ModulationScheme.parse(scheme)
    if scheme == ModulationScheme.BPSK:
        points = np.array([-1.0, 1.0], dtype=complex)
    elif scheme == ModulationScheme.QPSK:
        points = np.exp(1j * (np.pi / 4 + np.pi / 2 * np.arange(4)))
    elif scheme == ModulationScheme.PSK8:
        points = np.exp(2j * np.pi * np.arange(8) / 8)
    elif scheme in (ModulationScheme.QAM16, ModulationScheme.QAM64):
        side = 4 if scheme == ModulationScheme.QAM16 else 8
        levels = np.arange(-side + 1, side, 2)
        points = (levels[:, None] + 1j * levels[None, :]).reshape(-1)
    elif scheme == ModulationScheme.PAM4:
        points = np.array([-3.0, -1.0, 1.0, 3.0], dtype=complex)
    else:
        raise ContractError(f"{scheme.name} has no symbol constellation")
    return _normalize(points)


def rrc_taps(sps=SAMPLES_PER_SYMBOL, rolloff=ROLLOFF, span=RRC_SPAN):
    """Unit-energy root-raised-cosine filter spanning ``span`` symbols."""
    t = np.arange(-span * sps // 2, span * sps // 2 + 1) / sps
    beta = rolloff
    with np.errstate(divide="ignore", invalid="ignore"):
        taps = (
            np.sin(np.pi * t * (1 - beta)) + 4 * beta * t * np.cos(np.pi * t * (1 + beta))
        ) / (np.pi * t * (1 - (4 * beta * t) ** 2))
    taps[t == 0] = 1 - beta + 4 * beta / np.pi
    singular = np.isclose(np.abs(4 * beta * t), 1.0)
    taps[singular] = (beta / np.sqrt(2)) * (
        (1 + 2 / np.pi) * np.sin(np.pi / (4 * beta))
        + (1 - 2 / np.pi) * np.cos(np.pi / (4 * beta))
    )
    return taps / np.sqrt(np.sum(taps**2))


def _centered_filter(x, taps):
    delay = (len(taps) - 1) // 2
    return np.convolve(x, taps)[delay : delay + len(x)]


def pulse_shape(symbols, sps=SAMPLES_PER_SYMBOL, rolloff=ROLLOFF, span=RRC_SPAN):
    """Upsample ``symbols`` and shape them; symbol k peaks at sample ``k * sps``."""
    upsampled = np.zeros(len(symbols) * sps, dtype=complex)
    upsampled[::sps] = symbols
    return _centered_filter(upsampled, rrc_taps(sps, rolloff, span))


def matched_filter(x, sps=SAMPLES_PER_SYMBOL, rolloff=ROLLOFF, span=RRC_SPAN):
    return _centered_filter(np.asarray(x, dtype=complex), rrc_taps(sps, rolloff, span))


def _gaussian_pulse(sps, bt=GFSK_BT, span=4):
    t = np.arange(-span * sps // 2, span * sps // 2 + 1) / sps
    sigma = np.sqrt(np.log(2)) / (2 * np.pi * bt)
    taps = np.exp(-(t**2) / (2 * sigma**2))
    return taps / taps.sum()


def _audio(rng, length):
    pad = AUDIO_TAPS
    lowpass = sps_signal.firwin(AUDIO_TAPS, AUDIO_CUTOFF)
    message = sps_signal.lfilter(lowpass, 1.0, rng.standard_normal(length + 2 * pad))
    message = message[pad:]
    return message / np.max(np.abs(message))


def modulate(scheme, payload_seed, length, sps=SAMPLES_PER_SYMBOL, rolloff=ROLLOFF):
    """Unit average power complex baseband burst of ``length`` samples.

    Digital schemes draw uniform symbols (8 samples/symbol by default, symbol
    instants at multiples of ``sps``); analog schemes carry low-pass Gaussian
    audio.
    """
    if length < 1:
        raise ContractError(f"length must be >= 1, got {length}")
    scheme = ModulationScheme.parse(scheme)
    rng = rng_stream(int(payload_seed))
    n_symbols = math.ceil(length / sps) + RRC_SPAN
    start = (RRC_SPAN // 2) * sps
    if scheme in (ModulationScheme.GFSK, ModulationScheme.CPFSK):
        bits = rng.choice([-1.0, 1.0], size=n_symbols)
        freq = np.repeat(bits, sps)
        if scheme == ModulationScheme.GFSK:
            freq = np.convolve(freq, _gaussian_pulse(sps), mode="same")
        phase = np.cumsum(np.pi * FSK_INDEX * freq / sps)
        burst = np.exp(1j * phase)[start : start + length]
    elif scheme.is_analog:
        message = _audio(rng, length + 2 * AUDIO_TAPS)
        if scheme == ModulationScheme.WBFM:
            full = np.exp(2j * np.pi * WBFM_DEVIATION * np.cumsum(message))
        elif scheme == ModulationScheme.AM_DSB:
            full = (1 + AM_DEPTH * message).astype(complex)
        else:
            full = sps_signal.hilbert(message)
        burst = full[AUDIO_TAPS : AUDIO_TAPS + length]
    else:
        alphabet = constellation(scheme)
        symbols = alphabet[rng.integers(0, len(alphabet), size=n_symbols)]
        burst = pulse_shape(symbols, sps, rolloff)[start : start + length]
    return _normalize(burst)


@dataclass(frozen=True)
class ChannelConfig:
    """Impairments of one transmission.

    ``fading_taps`` holds ``(gain, delay)`` pairs; with ``rayleigh`` each gain
    is scaled by an independent unit-power complex Gaussian draw.
    ``snr_db = inf`` disables the noise.
    """

    snr_db: float = math.inf
    freq_offset_std: float = 0.0
    srate_offset_std: float = 0.0
    fading_taps: tuple = ((1.0, 0),)
    rayleigh: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.fading_taps:
            raise ContractError("at least one fading tap is required")
        if self.fading_taps[0][0] == 0:
            raise ContractError("the first fading tap must be nonzero")
        if any(int(delay) < 0 for _, delay in self.fading_taps):
            raise ContractError("fading delays must be >= 0")
        if self.freq_offset_std < 0 or self.srate_offset_std < 0:
            raise ContractError("offset deviations must be >= 0")


def apply_channel(signal, cfg, normalize=False):
    """Pass ``signal`` through the impairments of ``cfg``.

    Noise power is ``10 ** (-snr_db / 10)`` times the post-fading signal power.
    With ``normalize`` the faded signal is rescaled to unit power first.
    """
    rng = rng_stream(int(cfg.seed))
    y = np.asarray(signal, dtype=complex)
    n = np.arange(len(y))
    if cfg.srate_offset_std > 0:
        ratio = 1 + rng.normal(0, cfg.srate_offset_std)
        y = np.interp(n * ratio, n, y.real) + 1j * np.interp(n * ratio, n, y.imag)
    if cfg.freq_offset_std > 0:
        y = y * np.exp(2j * np.pi * rng.normal(0, cfg.freq_offset_std) * n)
    response = np.zeros(max(int(d) for _, d in cfg.fading_taps) + 1, dtype=complex)
    for gain, delay in cfg.fading_taps:
        if cfg.rayleigh:
            gain = gain * (rng.normal() + 1j * rng.normal()) / np.sqrt(2)
        response[int(delay)] += gain
    y = np.convolve(y, response)[: len(y)]
    if normalize:
        y = _normalize(y)
    if math.isfinite(cfg.snr_db):
        noise_power = np.mean(np.abs(y) ** 2) * 10 ** (-cfg.snr_db / 10)
        noise = rng.normal(size=len(y)) + 1j * rng.normal(size=len(y))
        y = y + np.sqrt(noise_power / 2) * noise
    return y


def to_iq(x):
    """Complex sequence to ``[T, 2]`` float32 (I in channel 0, Q in channel 1)."""
    return np.stack([x.real, x.imag], axis=-1).astype(np.float32)


@dataclass
class IQFrame:
    samples: np.ndarray
    label: ModulationScheme
    snr_db: float

    @property
    def length(self):
        return self.samples.shape[0]


@dataclass
class Dataset:
    """Frames stored as ``samples[N, T, 2]`` with per-frame labels and SNR tags."""

    samples: np.ndarray
    labels: np.ndarray
    snrs: np.ndarray
    split_tag: Split = None
    metadata: dict = field(default_factory=dict)
    classes: tuple = tuple(ModulationScheme)

    def __post_init__(self):
        self.classes = tuple(ModulationScheme.parse(c) for c in self.classes)
        self.samples = np.asarray(self.samples, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.snrs = np.asarray(self.snrs, dtype=np.int64)
        if self.samples.ndim != 3 or self.samples.shape[-1] != 2:
            raise ContractError(f"samples must be [N, T, 2], got {self.samples.shape}")
        if not len(self.samples) == len(self.labels) == len(self.snrs):
            raise ContractError("samples, labels and snrs must have the same length")
        if self.split_tag is not None:
            self.split_tag = Split(self.split_tag)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, index):
        return IQFrame(
            self.samples[index],
            ModulationScheme(int(self.labels[index])),
            float(self.snrs[index]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def frames(self):
        return list(self)

    @property
    def frame_length(self):
        return self.samples.shape[1]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.samples[indices],
            self.labels[indices],
            self.snrs[indices],
            self.split_tag,
            dict(self.metadata),
            self.classes,
        )

    def replace(self, samples=None, split_tag=None, **metadata):
        """Same labels and SNR tags, new samples and/or extra metadata."""
        merged = dict(self.metadata)
        merged.update(metadata)
        return Dataset(
            self.samples if samples is None else samples,
            self.labels.copy(),
            self.snrs.copy(),
            split_tag or self.split_tag,
            merged,
            self.classes,
        )

    @property
    def num_classes(self):
        return len(self.classes)

    @property
    def targets(self):
        """Class indices (positions in ``classes``) used by the classifier."""
        lookup = np.full(len(ModulationScheme), -1, dtype=np.int64)
        lookup[[int(c) for c in self.classes]] = np.arange(len(self.classes))
        targets = lookup[self.labels]
        if np.any(targets < 0):
            raise ContractError("dataset holds labels outside its class list")
        return targets

    def label_counts(self):
        return np.bincount(self.targets, minlength=self.num_classes)

    def by_snr(self):
        return {int(s): np.flatnonzero(self.snrs == s) for s in np.unique(self.snrs)}


@dataclass
class SynthConfig:
    schemes: tuple = tuple(ModulationScheme)
    snr_grid: tuple = SNR_GRID
    frame_length: int = FRAME_LENGTH
    train_size: int = 7700
    test_size: int = 330
    adv_size: int = 6600
    samples_per_symbol: int = SAMPLES_PER_SYMBOL
    rolloff: float = ROLLOFF
    freq_offset_std: float = 1e-4
    srate_offset_std: float = 1e-4
    fading_taps: tuple = DEFAULT_FADING
    rayleigh: bool = True
    master_seed: int = 0

    def __post_init__(self):
        self.schemes = tuple(ModulationScheme.parse(s) for s in self.schemes)
        self.snr_grid = tuple(int(s) for s in self.snr_grid)
        self.fading_taps = tuple((float(g), int(d)) for g, d in self.fading_taps)
        if not self.schemes or not self.snr_grid:
            raise ConfigurationError("schemes and snr_grid must be non-empty")
        if any(not -128 <= s <= 127 for s in self.snr_grid):
            raise ConfigurationError("SNR grid values must fit a signed byte")
        if self.frame_length < 1:
            raise ConfigurationError("frame_length must be >= 1")

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "snr_grid" in data and isinstance(data["snr_grid"], dict):
            grid = data["snr_grid"]
            data["snr_grid"] = tuple(range(grid["start"], grid["stop"] + 1, grid["step"]))
        return cls(**data)

    def to_dict(self):
        data = asdict(self)
        data["schemes"] = [s.name for s in self.schemes]
        data["snr_grid"] = list(self.snr_grid)
        data["fading_taps"] = [list(t) for t in self.fading_taps]
        return data

    def checksum(self):
        """Hash of every generator setting except the master seed."""
        data = self.to_dict()
        data.pop("master_seed")
        return hashlib.md5(json.dumps(data, sort_keys=True).encode()).hexdigest()

    def layout(self, split):
        """``(scheme, snr)`` of every frame of ``split``, in file order."""
        n_schemes, n_snrs = len(self.schemes), len(self.snr_grid)
        if split == Split.TINY_TEST:
            if self.test_size % n_schemes:
                raise ConfigurationError(
                    f"test_size {self.test_size} is not a multiple of the "
                    f"{n_schemes} schemes"
                )
            per_scheme = self.test_size // n_schemes
            return [
                (scheme, self.snr_grid[(s_idx * per_scheme + j) % n_snrs])
                for s_idx, scheme in enumerate(self.schemes)
                for j in range(per_scheme)
            ]
        size = self.train_size if split == Split.TINY_TRAIN else self.adv_size
        cells = n_schemes * n_snrs
        if size % cells:
            raise ConfigurationError(
                f"{split.value} size {size} cannot be balanced over {n_schemes} schemes "
                f"x {n_snrs} SNRs ({cells} cells)"
            )
        per_cell = size // cells
        return [
            (scheme, snr)
            for scheme in self.schemes
            for snr in self.snr_grid
            for _ in range(per_cell)
        ]


def synthesize_frame(cfg, scheme, snr_db, split, index):
    """One frame; its random stream depends only on (seed, split, index)."""
    payload_seed, channel_seed = np.random.SeedSequence(
        [cfg.master_seed, split.stream_id, index]
    ).generate_state(2, dtype=np.uint64)
    burst = modulate(
        scheme, int(payload_seed), cfg.frame_length, cfg.samples_per_symbol, cfg.rolloff
    )
    channel = ChannelConfig(
        snr_db=snr_db,
        freq_offset_std=cfg.freq_offset_std,
        srate_offset_std=cfg.srate_offset_std,
        fading_taps=cfg.fading_taps,
        rayleigh=cfg.rayleigh,
        seed=int(channel_seed),
    )
    return to_iq(apply_channel(burst, channel, normalize=True))


def synthesize_split(cfg, split, workers=1):
    layout = cfg.layout(split)

    def build(item):
        index, (scheme, snr) = item
        return synthesize_frame(cfg, scheme, snr, split, index)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        frames = list(pool.map(build, enumerate(layout)))
    samples = (
        np.stack(frames)
        if frames
        else np.zeros((0, cfg.frame_length, 2), dtype=np.float32)
    )
    _logger.info("Synthesized %s frames for %s", len(frames), split.value)
    return Dataset(
        samples,
        [int(scheme) for scheme, _ in layout],
        [snr for _, snr in layout],
        split,
        {
            "generator": cfg.to_dict(),
            "generator_hash": cfg.checksum(),
            "master_seed": cfg.master_seed,
        },
        cfg.schemes,
    )


def make_dataset(cfg, workers=1):
    """The three clean splits: tiny_train, tiny_test and adv_data."""
    return {
        split: synthesize_split(cfg, split, workers)
        for split in (Split.TINY_TRAIN, Split.TINY_TEST, Split.ADV_DATA)
    }
