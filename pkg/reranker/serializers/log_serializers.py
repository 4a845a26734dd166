from rest_framework import serializers

from ..feature_codec import DELETE_REASONS, ExposureAction, PageViewAction

LOG_KINDS = (
    'header', 'page', 'expose', 'click', 'delete',
    'behavior', 'trigger', 'rerank', 'session_end',
)

TRIGGER_KINDS = ('click', 'delete', 'exposures')


class ItemAttributesSerializer(serializers.Serializer):
    item_id = serializers.IntegerField(min_value=0)
    category_id = serializers.IntegerField(min_value=0)
    brand_id = serializers.IntegerField(min_value=0)
    gender_id = serializers.IntegerField(min_value=0)
    price_level = serializers.IntegerField(min_value=0)
    age_level = serializers.IntegerField(min_value=0)
    bc_type = serializers.IntegerField(min_value=0)
    scores = serializers.ListField(child=serializers.FloatField())
    price = serializers.FloatField(min_value=0)


class HeaderPayloadSerializer(serializers.Serializer):
    config_hash = serializers.CharField()
    seed = serializers.IntegerField()
    arm = serializers.CharField()
    model_version = serializers.IntegerField(allow_null=True)


class PagePayloadSerializer(serializers.Serializer):
    request_id = serializers.CharField()
    served_version = serializers.IntegerField(allow_null=True)
    fallback = serializers.BooleanField()
    items = ItemAttributesSerializer(many=True)


class ExposePayloadSerializer(serializers.Serializer):
    item_id = serializers.IntegerField(min_value=0)
    position = serializers.IntegerField(min_value=1)


class DeletePayloadSerializer(serializers.Serializer):
    item_id = serializers.IntegerField(min_value=0)
    position = serializers.IntegerField(min_value=1)
    reason = serializers.ChoiceField(choices=DELETE_REASONS[1:])


class BehaviorRecordSerializer(serializers.Serializer):
    kind = serializers.ChoiceField(choices=('IE', 'IPV'))
    timestamp = serializers.IntegerField(min_value=0)
    item = ItemAttributesSerializer()
    action = serializers.DictField()

    def validate(self, data):
        action_cls = ExposureAction if data['kind'] == 'IE' else PageViewAction
        try:
            action_cls.from_dict(data['action'])
        except (KeyError, TypeError, ValueError) as e:
            raise serializers.ValidationError({'action': f"Invalid {data['kind']} action: {e}"})
        return data


class BehaviorPayloadSerializer(serializers.Serializer):
    record = BehaviorRecordSerializer()


class TriggerPayloadSerializer(serializers.Serializer):
    request_id = serializers.CharField()
    trigger_kind = serializers.ChoiceField(choices=TRIGGER_KINDS)
    candidates = serializers.ListField(child=serializers.IntegerField(min_value=0))


class ScoredItemSerializer(serializers.Serializer):
    item_id = serializers.IntegerField(min_value=0)
    score = serializers.FloatField()


class RerankPayloadSerializer(serializers.Serializer):
    request_id = serializers.CharField()
    model_version = serializers.IntegerField(allow_null=True)
    disabled = serializers.BooleanField()
    reordered = serializers.BooleanField()
    order = ScoredItemSerializer(many=True)


class EmptyPayloadSerializer(serializers.Serializer):
    pass


PAYLOAD_SERIALIZERS = {
    'header': HeaderPayloadSerializer,
    'page': PagePayloadSerializer,
    'expose': ExposePayloadSerializer,
    'click': ExposePayloadSerializer,
    'delete': DeletePayloadSerializer,
    'behavior': BehaviorPayloadSerializer,
    'trigger': TriggerPayloadSerializer,
    'rerank': RerankPayloadSerializer,
    'session_end': EmptyPayloadSerializer,
}


class LogRecordSerializer(serializers.Serializer):
    """One SessionLog line: ``{ts, user, kind, payload}``."""
    ts = serializers.IntegerField(min_value=0)
    user = serializers.IntegerField(min_value=0, allow_null=True)
    kind = serializers.ChoiceField(choices=LOG_KINDS)
    payload = serializers.DictField()

    def validate(self, data):
        if data['kind'] != 'header' and data['user'] is None:
            raise serializers.ValidationError({'user': 'Only header records may omit the user.'})
        payload = PAYLOAD_SERIALIZERS[data['kind']](data=data['payload'])
        if not payload.is_valid():
            raise serializers.ValidationError({'payload': payload.errors})
        return data
