import pytest
import torch

from oobtrigger.dataset import generate_synthetic_dataset, train_test_split
from oobtrigger.detector import ToyArchitecture, ToyDetector, train_toy_detector

# Desk-scale fixture shared by the detector, evaluation and acceptance tests.
N_TRAIN = 500
N_TEST = 200
IMAGE_SIZE = (64, 64)
DATA_SEED = 7
DETECTOR_EPOCHS = 100


@pytest.fixture(scope="session")
def synth_split():
    full = generate_synthetic_dataset(N_TRAIN + N_TEST, IMAGE_SIZE, DATA_SEED)
    return train_test_split(full, N_TEST, seed=0)


@pytest.fixture(scope="session")
def trained(synth_split):
    train, test = synth_split
    model, metrics = train_toy_detector(train, DETECTOR_EPOCHS, seed=0, holdout=test)
    for p in model.parameters():
        p.requires_grad_(False)
    return model, metrics


@pytest.fixture(scope="session")
def trained_detector(trained):
    return trained[0]


def tiny_detector(seed=0, size=(32, 32), dtype=torch.float64, width=4):
    """Small random-weight detector for gradient checks, with objectness bias lifted."""
    torch.manual_seed(seed)
    model = ToyDetector(ToyArchitecture(num_classes=4, input_size=size, width=width, neck_channels=8))
    with torch.no_grad():
        model.head[-1].bias[4] = 0.0
    model = model.to(dtype)
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@pytest.fixture
def tiny():
    return tiny_detector()
