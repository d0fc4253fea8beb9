import os
from dataclasses import dataclass, field, fields, replace
from typing import Dict, Mapping, Optional

from dotenv import dotenv_values, load_dotenv
from marshmallow import RAISE, Schema, ValidationError, fields as mfields, validate

from layout_data.errors import ConfigError
from layout_engine.augment import AugmentConfig
from layout_engine.model import ModelConfig
from layout_engine.synth import LayoutFamily, SynthPageSpec
from layout_engine.trainer import TrainConfig

load_dotenv()


class Config:
    # The only environment-driven setting.
    CACHE_DIR = os.path.expanduser(os.getenv('DLA_CACHE_DIR', os.path.join('~', '.cache', 'doclayout')))

    LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'
    PRESETS = ('toy', 'full')


class CommaList(mfields.Field):
    """`a,b,c` in a key=value file, or a list/tuple passed from code."""

    def __init__(self, inner: mfields.Field, length: Optional[int] = None, **kwargs):
        super().__init__(**kwargs)
        self.inner = inner
        self.length = length

    def _deserialize(self, value, attr, data, **kwargs):
        items = [v.strip() for v in value.split(',') if v.strip()] if isinstance(value, str) else list(value)
        if self.length is not None and len(items) != self.length:
            raise ValidationError(f'expected {self.length} comma-separated values, got {len(items)}')
        return tuple(self.inner.deserialize(v) for v in items)


class _FlatSchema(Schema):
    class Meta:
        unknown = RAISE


class ModelConfigSchema(_FlatSchema):
    num_queries = mfields.Integer(validate=validate.Range(min=1))
    embed_dim = mfields.Integer(validate=validate.Range(min=1))
    mask_embedding_dim = mfields.Integer(validate=validate.Range(min=1))
    refinement_iterations = mfields.Integer(validate=validate.Range(min=1))
    num_classes = mfields.Integer(validate=validate.Range(min=1))
    roi_resolution = mfields.Integer(validate=validate.Range(min=1))
    encoder_layers = mfields.Integer(validate=validate.Range(min=0))
    encoder_heads = mfields.Integer(validate=validate.Range(min=1))
    ffn_dim = mfields.Integer(validate=validate.Range(min=1))
    dynamic_dim = mfields.Integer(validate=validate.Range(min=1))
    mask_patch_size = mfields.Integer(validate=validate.Range(min=1))
    use_encoder = mfields.Boolean()
    use_dynamic_decoder = mfields.Boolean()
    share_heads = mfields.Boolean()
    shared_trunk = mfields.Boolean()
    detach_boxes = mfields.Boolean()


class TrainConfigSchema(_FlatSchema):
    epochs = mfields.Integer(validate=validate.Range(min=1))
    base_lr = mfields.Float(validate=validate.Range(min=0, min_inclusive=False))
    lr_milestones = CommaList(mfields.Float(), length=2)
    lr_factors = CommaList(mfields.Float(), length=2)
    weight_decay = mfields.Float(validate=validate.Range(min=0))
    betas = CommaList(mfields.Float(), length=2)
    seed = mfields.Integer()
    batch_size = mfields.Integer(validate=validate.Range(min=1))
    focal = mfields.Boolean()
    max_grad_norm = mfields.Float(validate=validate.Range(min=0))
    eval_every = mfields.Integer(validate=validate.Range(min=0))
    max_steps = mfields.Integer(allow_none=True, validate=validate.Range(min=1))
    cls_weight = mfields.Float(validate=validate.Range(min=0))
    l1_weight = mfields.Float(validate=validate.Range(min=0))
    giou_weight = mfields.Float(validate=validate.Range(min=0))
    mask_weight = mfields.Float(validate=validate.Range(min=0))


class AugmentConfigSchema(_FlatSchema):
    enabled = mfields.Boolean()
    min_short = mfields.Integer(validate=validate.Range(min=1))
    max_short = mfields.Integer(validate=validate.Range(min=1))
    max_long = mfields.Integer(validate=validate.Range(min=1))
    crop_prob = mfields.Float(validate=validate.Range(min=0, max=1))
    min_crop_frac = mfields.Float(validate=validate.Range(min=0, max=1, min_inclusive=False))


class SynthSpecSchema(_FlatSchema):
    family = mfields.Enum(LayoutFamily, by_value=True)
    categories = CommaList(mfields.String())
    min_instances = mfields.Integer(validate=validate.Range(min=1))
    max_instances = mfields.Integer(validate=validate.Range(min=1))
    width = mfields.Integer(validate=validate.Range(min=64))
    height = mfields.Integer(validate=validate.Range(min=64))
    margin = mfields.Integer(validate=validate.Range(min=0))
    gap = mfields.Integer(validate=validate.Range(min=0))
    min_block = mfields.Integer(validate=validate.Range(min=2))
    taxonomy_id = mfields.String()


SECTIONS = {
    'model': (ModelConfig, ModelConfigSchema),
    'train': (TrainConfig, TrainConfigSchema),
    'augment': (AugmentConfig, AugmentConfigSchema),
    'synth': (SynthPageSpec, SynthSpecSchema),
}

KEY_OWNER = {f.name: section for section, (cls, _) in SECTIONS.items() for f in fields(cls)}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    synth: SynthPageSpec = field(default_factory=SynthPageSpec)
    preset: str = 'full'

    def snapshot(self) -> Dict[str, object]:
        def plain(obj):
            out = {}
            for f in fields(obj):
                v = getattr(obj, f.name)
                out[f.name] = v.value if isinstance(v, LayoutFamily) else (list(v) if isinstance(v, tuple) else v)
            return out
        return {'preset': self.preset, 'model': plain(self.model), 'train': plain(self.train),
                'augment': plain(self.augment), 'synth': plain(self.synth)}


def preset_config(preset: str = 'toy') -> RunConfig:
    if preset == 'toy':
        return RunConfig(ModelConfig.toy(), TrainConfig.toy(), AugmentConfig(enabled=False), SynthPageSpec(), 'toy')
    if preset == 'full':
        return RunConfig(ModelConfig.full(), TrainConfig.full(), AugmentConfig(), SynthPageSpec(), 'full')
    raise ConfigError(f"unknown preset '{preset}'. Known: {', '.join(Config.PRESETS)}")


def read_config_file(path) -> Dict[str, str]:
    """Flat key=value pairs; '#' starts a comment."""
    if not os.path.exists(path):
        raise ConfigError(f'config file {path} does not exist')
    raw = dotenv_values(path)
    for key, value in raw.items():
        if value is None:
            raise ConfigError(f"config key '{key}' in {path} has no value")
    return dict(raw)


def coerce_values(values: Mapping[str, object], source: str = 'config') -> Dict[str, Dict[str, object]]:
    """Groups keys by the config they belong to and converts them to typed values."""
    grouped: Dict[str, Dict[str, object]] = {}
    for key, value in values.items():
        if key not in KEY_OWNER:
            raise ConfigError(f"unknown {source} key '{key}'")
        grouped.setdefault(KEY_OWNER[key], {})[key] = value
    out = {}
    for section, raw in grouped.items():
        schema = SECTIONS[section][1]()
        try:
            out[section] = schema.load(raw)
        except ValidationError as e:
            key = next(iter(e.messages))
            msg = e.messages[key]
            raise ConfigError(f"invalid {source} value for '{key}': {msg[0] if isinstance(msg, list) else msg}") from e
    return out


def load_run_config(path=None, preset: str = 'toy', overrides: Optional[Mapping[str, object]] = None) -> RunConfig:
    """
    Resolves a run configuration. Precedence, lowest first: dataclass
    defaults, preset, config file, overrides (command-line flags).
    """
    cfg = preset_config(preset)
    layers = []
    if path is not None:
        layers.append(coerce_values(read_config_file(path), f'config file {path}'))
    if overrides:
        layers.append(coerce_values({k: v for k, v in overrides.items() if v is not None}, 'flag'))
    for layer in layers:
        for section, values in layer.items():
            setattr(cfg, section, replace(getattr(cfg, section), **values))
    try:
        cfg.model.validate()
        cfg.train.validate()
        cfg.augment.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cfg


def load_synth_spec(path=None, overrides: Optional[Mapping[str, object]] = None) -> SynthPageSpec:
    values: Dict[str, object] = dict(read_config_file(path)) if path is not None else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    layer = coerce_values(values, 'synth spec')
    extra = set(layer) - {'synth'}
    if extra:
        raise ConfigError(f"synth spec files only take page-generator keys, got {sorted(extra)} keys")
    spec = replace(SynthPageSpec(), **layer.get('synth', {}))
    try:
        return spec.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
