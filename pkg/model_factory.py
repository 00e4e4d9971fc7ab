"""
モデル変種生成システム
アーキテクチャとモダリティマスクの組み合わせから学習用モデルを生成する
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from errors import ValidationError
from fusion import FusionMode, FusionModel, LfLstmModel, LstmConfig, ModelKind, MultConfig, MultModel
from sequences import Modality, MODALITY_ORDER, modality_label, parse_modalities
from training import TrainConfig

# 比較実験の並び（単一モダリティ -> 3モダリティ）
EXPERIMENT_MASKS = ("t", "a", "v", "tva")


@dataclass
class VariantProfile:
    """モデル変種のプロファイル"""
    kind: ModelKind
    modalities: Tuple[Modality, ...]
    description: str
    architecture: Dict[str, Any] = field(default_factory=dict)

    @property
    def name(self) -> str:
        return f"{modality_label(self.modalities)}-{self.kind.display_name}"

    @property
    def mask(self) -> str:
        return "".join(m.letter for m in self.modalities)

    @property
    def is_unimodal(self) -> bool:
        return len(self.modalities) == 1


class ModelFactory:
    """融合モデル生成ファクトリー"""

    def __init__(self, overrides: Optional[Dict[ModelKind, Dict[str, Any]]] = None):
        self.templates = self._load_templates()
        for kind, values in (overrides or {}).items():
            self.templates[ModelKind(kind)]["architecture"].update(values)

    def _load_templates(self) -> Dict[ModelKind, Dict[str, Any]]:
        """アーキテクチャごとの既定値（卓上規模）"""
        return {
            ModelKind.MULT: {
                "architecture": {"d_k": 32, "layers": 1, "residual": False, "head_hidden": 32, "dropout": 0.1},
                "multimodal": "入力自己注意 -> 6本の有向CAB -> 出力自己注意 -> 早期融合",
                "unimodal": "CABを自己注意に置き換えた単一モダリティ版",
            },
            ModelKind.LF_LSTM: {
                "architecture": {"hidden": 16, "head_hidden": 32, "dropout": 0.1},
                "multimodal": "モダリティごとの2層LSTM -> 最終隠れ状態の連結 -> 後期融合",
                "unimodal": "1モダリティの2層LSTMのみ",
            },
        }

    def create_profile(self, kind: Union[ModelKind, str], modalities: Union[str, Sequence[Modality]]) -> VariantProfile:
        kind = ModelKind(kind)
        if isinstance(modalities, str):
            modalities = parse_modalities(modalities)
        modalities = tuple(m for m in MODALITY_ORDER if m in set(modalities))
        if not modalities:
            raise ValidationError("モダリティマスクが空です")
        template = self.templates[kind]
        description = template["unimodal"] if len(modalities) == 1 else template["multimodal"]
        return VariantProfile(kind, modalities, description, dict(template["architecture"]))

    def experiment_profiles(self, kinds: Sequence[Union[ModelKind, str]] = tuple(ModelKind),
                            masks: Sequence[str] = EXPERIMENT_MASKS) -> List[VariantProfile]:
        """比較実験の全変種（アーキテクチャ × T/A/V/TVA）"""
        return [self.create_profile(kind, mask) for kind in kinds for mask in masks]

    def model_config(self, profile: VariantProfile, dims: Sequence[int],
                     fusion: Union[FusionMode, str] = FusionMode.CONCAT) -> Union[MultConfig, LstmConfig]:
        if profile.kind is ModelKind.MULT:
            return MultConfig(tuple(dims), profile.modalities, fusion=FusionMode(fusion), **profile.architecture)
        return LstmConfig(tuple(dims), profile.modalities, **profile.architecture)

    def build(self, profile: VariantProfile, dims: Sequence[int], seed: int,
              fusion: Union[FusionMode, str] = FusionMode.CONCAT) -> FusionModel:
        """プロファイルから初期化済みモデルを生成"""
        config = self.model_config(profile, dims, fusion)
        model_class = MultModel if profile.kind is ModelKind.MULT else LfLstmModel
        return model_class(config, seed=seed)

    def build_from_train_config(self, config: TrainConfig, dims: Sequence[int]) -> FusionModel:
        profile = self.create_profile(config.model, config.modalities)
        return self.build(profile, dims, config.seed, config.fusion)

    def train_config(self, profile: VariantProfile, **values) -> TrainConfig:
        return TrainConfig(model=profile.kind, modalities=profile.modalities, **values)
