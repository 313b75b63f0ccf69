from abc import ABC, abstractmethod

from keceni_analysis.core.graph import Graph
from keceni_analysis.core.models import Dataset, SimConfig, TreatmentScenario


class WorldProvider(ABC):
    """在给定网络上生成 (Y, T, X) 并给出真实的节点反事实均值"""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg

    @abstractmethod
    def generate(self, graph: Graph, seed: int) -> Dataset:
        """Draw covariates, treatments and outcomes on the graph"""
        pass

    @abstractmethod
    def true_theta(self, graph: Graph, scenario: TreatmentScenario) -> float:
        """θ_{i*}(t*) under the data-generating law"""
        pass
