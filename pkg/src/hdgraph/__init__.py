"""Head-driven graph re-ranking for cloth-changing person retrieval."""

from .core import (
    EmbeddingRecord,
    EmbeddingSet,
    SimilarityMatrix,
    cosine_sim,
    l2_normalize,
    pairwise_similarity,
)
from .graph import (
    KnnGraph,
    MixhopLayer,
    MixhopNet,
    NormalizedAdjacency,
    build_knn_graph,
    cross_entropy,
    extract_updated_features,
    gcn_forward,
    init_mixhop_net,
    mixhop_forward,
    normalize_adjacency,
    train_gcn,
    transfer_head_edges,
)
from .losses import OimBank, TripletConfig, oim_loss, oim_update_bank, triplet_loss
from .metrics import (
    BoxRecord,
    RankedResult,
    detection_ap_recall,
    iou,
    map_and_cmc,
    match_detections,
    retrieval_ap,
)
from .rerank import FusionConfig, PipelineConfig, fuse_similarities, rerank_pipeline
from .synth import ScenarioConfig, generate_scenario, neighbor_purity

__version__ = "0.1.0"
