# License AGPL-3.0 or later (http://www.gnu.org/licenses/agpl)

from pathlib import Path

import numpy as np

from amc_shapft.tools.classifier import ModelConfig, ModelParams
from amc_shapft.tools.signals import Dataset, ModulationScheme, Split, SynthConfig

conf_path = Path(__file__).parent / "conf"
micro_conf = conf_path / "micro.yml"

MICRO_MODEL = ModelConfig(
    conv_kernels=4, conv_width=3, lstm_units=4, fc1_units=6, num_classes=2
)


def micro_synth(**kw):
    """Two schemes, two SNRs, frames of 32 samples."""
    values = dict(
        schemes=("BPSK", "QPSK"),
        snr_grid=(10, 18),
        frame_length=32,
        train_size=8,
        test_size=4,
        adv_size=8,
        rayleigh=False,
        master_seed=7,
    )
    values.update(kw)
    return SynthConfig(**values)


def micro_params(seed=0, config=MICRO_MODEL):
    return ModelParams.initialize(config, seed)


def random_dataset(count=6, length=16, classes=(0, 1), seed=0, split=Split.TINY_TRAIN):
    rng = np.random.default_rng(seed)
    labels = [int(classes[i % len(classes)]) for i in range(count)]
    return Dataset(
        rng.normal(size=(count, length, 2)).astype(np.float32),
        labels,
        [10] * count,
        split,
        {"generator_hash": "abc", "master_seed": 7},
        tuple(ModulationScheme(c) for c in classes),
    )
