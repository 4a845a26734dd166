from rest_framework import serializers

from ..config import ITEM_TABLES
from ..crban import VARIANTS


class FeatureConfigSerializer(serializers.Serializer):
    boundaries = serializers.DictField(child=serializers.ListField(child=serializers.FloatField()))
    embedding_dims = serializers.DictField(child=serializers.IntegerField(min_value=1))
    vocab_sizes = serializers.DictField(child=serializers.IntegerField(min_value=1))
    score_count = serializers.IntegerField(min_value=0)

    def validate(self, data):
        for key in ('embedding_dims', 'vocab_sizes'):
            missing = set(ITEM_TABLES) - set(data[key])
            if missing:
                raise serializers.ValidationError({key: f"Missing tables: {sorted(missing)}"})
        for name, bounds in data['boundaries'].items():
            if any(b >= a for b, a in zip(bounds, bounds[1:])):
                raise serializers.ValidationError({'boundaries': f"{name} is not strictly ascending"})
        return data


class ModelDimsSerializer(serializers.Serializer):
    gru_layers = serializers.IntegerField(min_value=1)
    gru_hidden = serializers.IntegerField(min_value=1)
    attention_hidden = serializers.IntegerField(min_value=1)
    mlp_hidden = serializers.ListField(child=serializers.IntegerField(min_value=1), allow_empty=False)
    mlp_input = serializers.ChoiceField(choices=('encoding', 'raw'))
    init_scale = serializers.FloatField()
    max_ie_length = serializers.IntegerField(min_value=1)
    max_ipv_length = serializers.IntegerField(min_value=1)


class BundleManifestSerializer(serializers.Serializer):
    version = serializers.IntegerField(min_value=0)
    variant = serializers.ChoiceField(choices=list(VARIANTS))
    feature_config = FeatureConfigSerializer()
    dims = ModelDimsSerializer()
    config_hash = serializers.CharField(allow_blank=True, required=False, default='')
    gru_convention = serializers.CharField()
