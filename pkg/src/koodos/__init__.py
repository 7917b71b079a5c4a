"""Continuous-time domain generalization through Koopman-linearised model dynamics."""
from koodos.domains import Domain, DomainSequence, moons_sequence, split_train_test
from koodos.nets import FlatParams, MlpSpec
from koodos.system import KoodosConfig, KoodosSystem, evaluate, generalize, train_joint

__version__ = "0.1.0"

__all__ = ["Domain", "DomainSequence", "moons_sequence", "split_train_test", "FlatParams",
           "MlpSpec", "KoodosConfig", "KoodosSystem", "evaluate", "generalize", "train_joint"]
