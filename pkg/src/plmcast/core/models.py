"""Domain vocabularies shared across plmcast modules."""

try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        def __str__(self) -> str:
            return str(self.value)


class Provenance(StrEnum):
    """Where the backbone weights come from."""

    PRETRAINED = "pretrained"
    RANDOM_INIT = "random_init"
    STUB = "stub"
    LLM2ATTN = "llm2attn"
    LLM2TRSF = "llm2trsf"


class Arch(StrEnum):
    """Backbone architecture shape: published GPT-2 or a tiny test-sized variant."""

    GPT2 = "gpt2"
    STUB = "stub"


class FreezeMode(StrEnum):
    DEFAULT = "default"
    NO_FREEZE = "no_freeze"


class Branches(StrEnum):
    """Which branches a model carries."""

    DUAL = "dual"
    PLM_ONLY = "plm_only"
    TS_ONLY = "ts_only"


class FusionMode(StrEnum):
    CMF = "cmf"
    SUM = "sum"
    CONCAT = "concat"
    ATTENTION = "attention"


class CrossFeed(StrEnum):
    """How fused features flow into the next time-series layer."""

    FORWARD = "forward"
    PARALLEL = "parallel"


class HeadSource(StrEnum):
    MIX = "mix"
    PLM = "plm"


class TextMode(StrEnum):
    """Text-quality interventions applied to the semantic descriptions."""

    SEMANTIC = "semantic"
    RANDOM = "random"
    NOISY = "noisy"


class MissingPolicy(StrEnum):
    REJECT = "reject"
    FFILL = "ffill"


class FewShotMode(StrEnum):
    PREFIX = "prefix"
    RANDOM = "random"


class DataSource(StrEnum):
    CSV = "csv"
    SYNTHETIC = "synthetic"


class AnalysisKind(StrEnum):
    CKA = "cka"
    CORR = "corr"


class SweepParameter(StrEnum):
    """Scalar hyperparameters the sensitivity sweep varies one at a time."""

    LOSS_WEIGHT = "loss_weight"
    CORRELATION_WEIGHT = "correlation_weight"


class Variant(StrEnum):
    """Ablation tags understood by the evaluation harness."""

    FULL = "full"
    FUSION_SUM = "fusion_sum"
    FUSION_CONCAT = "fusion_concat"
    FUSION_ATTENTION = "fusion_attention"
    PLM_ONLY = "plm_only"
    TS_ONLY = "ts_only"
    LLM2ATTN = "llm2attn"
    LLM2TRSF = "llm2trsf"
    RANDOM_INIT = "random_init"
    NO_FREEZE = "no_freeze"
    NO_TEXT = "no_text"
    RANDOM_TEXT = "random_text"
    NOISY_TEXT = "noisy_text"
    NO_EXTRACTOR = "no_extractor"
    NO_CHANNEL_LAYER = "no_channel_layer"
    NO_CURRENT = "no_current"
    NO_MEMORY = "no_memory"
    NO_GATING = "no_gating"
    N_PLM_3 = "n_plm_3"
    N_PLM_6 = "n_plm_6"
    N_PLM_12 = "n_plm_12"
