import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
import voluptuous as vol
from scipy import special

from .Errors import DimensionError, TrainingError, UndefinedMetricError
from .Metrics import ScoreTable, auc
from .Utils import check_seed, rng_for

ARCHITECTURES = ('linear', 'mlp')
HIDDEN_WIDTH = 256
LEARNING_RATE = 1e-4
BATCH_SIZE = 256
MAX_EPOCHS = 100
PATIENCE = 10

# Adam
BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8

GRADIENT_STEP = 1e-5
GRADIENT_FLOOR = 1e-6
MAX_CHECK_SAMPLES = 8
MAX_CHECK_HIDDEN_LAYERS = 3

SPEC_SCHEMA = vol.Schema({
    vol.Required('architecture'): vol.In(ARCHITECTURES),
    vol.Required('hidden_layers'): vol.All(vol.Coerce(int), vol.Range(min=0)),
    vol.Required('hidden_width'): vol.All(vol.Coerce(int), vol.Range(min=1)),
    vol.Required('learning_rate'): vol.All(vol.Coerce(float), vol.Range(min=0, min_included=False)),
    vol.Required('batch_size'): vol.All(vol.Coerce(int), vol.Range(min=1)),
    vol.Required('max_epochs'): vol.All(vol.Coerce(int), vol.Range(min=1)),
    vol.Required('patience'): vol.All(vol.Coerce(int), vol.Range(min=1)),
    vol.Required('seed'): vol.All(vol.Coerce(int), check_seed),
})


@dataclass(frozen=True)
class ProbeSpec:
    architecture: str = 'linear'
    hidden_layers: int = 0
    hidden_width: int = HIDDEN_WIDTH
    learning_rate: float = LEARNING_RATE
    batch_size: int = BATCH_SIZE
    max_epochs: int = MAX_EPOCHS
    patience: int = PATIENCE
    seed: int = 0

    def __post_init__(self):
        try:
            SPEC_SCHEMA(asdict(self))
        except vol.Invalid as e:
            raise ValueError(f"invalid probe spec: {e}") from None
        if self.architecture == 'linear' and self.hidden_layers != 0:
            raise ValueError("a linear probe has no hidden layers")
        if self.architecture == 'mlp' and self.hidden_layers < 1:
            raise ValueError("an MLP probe needs at least one hidden layer")

    def layer_sizes(self, input_dim, outputs):
        return [input_dim] + [self.hidden_width] * self.hidden_layers + [outputs]

    def echo(self):
        return asdict(self)


PRESETS = {
    'linear': ProbeSpec('linear'),
    'mlp3': ProbeSpec('mlp', hidden_layers=3),
    'mlp5': ProbeSpec('mlp', hidden_layers=5),
}


@dataclass(frozen=True, eq=False)
class ProbeModel:
    """Ordered (weight, bias) layers; weights are (fan_in, fan_out). Hidden layers use ReLU, outputs logistic."""
    layers: list
    label_names: tuple
    activation: str = 'relu'

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("a probe needs at least one layer")
        for i, (weight, bias) in enumerate(self.layers):
            if weight.ndim != 2 or bias.shape != (weight.shape[1],):
                raise DimensionError(f"layer {i}: weight {weight.shape} and bias {bias.shape} do not match")
            if i and self.layers[i - 1][0].shape[1] != weight.shape[0]:
                raise DimensionError(f"layer {i} expects {weight.shape[0]} inputs, previous layer gives "
                                     f"{self.layers[i - 1][0].shape[1]}")
            if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
                raise TrainingError(f"layer {i} has non-finite parameters")
        if self.layers[-1][0].shape[1] != len(self.label_names):
            raise DimensionError(f"output width {self.layers[-1][0].shape[1]} != {len(self.label_names)} labels")

    @property
    def input_dim(self):
        return self.layers[0][0].shape[0]

    @property
    def architecture(self):
        return 'linear' if len(self.layers) == 1 else 'mlp'

    def to_dict(self):
        return {
            'architecture': self.architecture,
            'activation': self.activation,
            'input_dim': self.input_dim,
            'labels': list(self.label_names),
            'layers': [{'shape': list(w.shape), 'weight': w.ravel().tolist(), 'bias': b.tolist()}
                       for w, b in self.layers],
        }

    @classmethod
    def from_dict(cls, data):
        layers = [(np.asarray(layer['weight'], dtype=np.float64).reshape(layer['shape']),
                   np.asarray(layer['bias'], dtype=np.float64)) for layer in data['layers']]
        return cls(layers=layers, label_names=tuple(data['labels']), activation=data.get('activation', 'relu'))


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def record(self, epoch, train_loss, val_macro_auc):
        self.epochs.append({'epoch': epoch, 'train_loss': train_loss, 'val_macro_auc': val_macro_auc})

    @property
    def best_val_macro_auc(self):
        return max(row['val_macro_auc'] for row in self.epochs)

    def to_dataframe(self):
        return pd.DataFrame(self.epochs, columns=['epoch', 'train_loss', 'val_macro_auc'])


def init_layers(sizes, seed):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases from the seed's first substream."""
    rng = rng_for(seed, 0)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        bias = rng.uniform(-bound, bound, size=fan_out)
        layers.append((weight, bias))
    return layers


def forward(layers, X, start=0, inputs=None):
    """Logits and the per-layer inputs and pre-activations; ``start``/``inputs`` resume mid-network."""
    activation = X if inputs is None else inputs
    layer_inputs, pre_activations = [], []
    for i in range(start, len(layers)):
        weight, bias = layers[i]
        layer_inputs.append(activation)
        z = activation @ weight + bias
        pre_activations.append(z)
        activation = np.maximum(z, 0.0) if i < len(layers) - 1 else z
    return activation, layer_inputs, pre_activations


def masked_bce(logits, Y):
    """Mean binary cross-entropy over the known (non-NaN) label entries."""
    known = ~np.isnan(Y)
    active = int(known.sum())
    if active == 0:
        raise TrainingError("no supervised signal: every label is missing")
    targets = np.where(known, Y, 0.0)
    losses = np.logaddexp(0.0, logits) - targets * logits
    return float(np.sum(losses[known]) / active), known, targets, active


def loss_and_gradients(layers, X, Y):
    logits, layer_inputs, pre_activations = forward(layers, X)
    loss, known, targets, active = masked_bce(logits, Y)
    delta = np.where(known, special.expit(logits) - targets, 0.0) / active
    gradients = [None] * len(layers)
    for i in reversed(range(len(layers))):
        weight, _ = layers[i]
        gradients[i] = (layer_inputs[i].T @ delta, delta.sum(axis=0))
        if i:
            delta = (delta @ weight.T) * (pre_activations[i - 1] > 0.0)
    return loss, gradients


def _aligned(embeddings, cohort, labels):
    cohort.require_ids(embeddings.ids)
    return embeddings.matrix, cohort.label_matrix(labels, embeddings.ids)


def macro_auc(scores, Y, labels):
    values = []
    for j, label in enumerate(labels):
        try:
            values.append(auc(scores[:, j], Y[:, j]))
        except UndefinedMetricError:
            logging.debug(f"Validation AUC for {label} undefined; left out of the macro average")
    if not values:
        raise TrainingError("validation set has no label with both classes present")
    return float(np.mean(values))


def train_probe(spec, train, val, labels):
    """Train a probe head on frozen embeddings; returns (ProbeModel of the best validation epoch, TrainingLog).

    ``train`` and ``val`` are (EmbeddingSet, Cohort) pairs. Samples with every label missing are dropped
    before training, so they influence neither the batches nor the parameters.
    """
    labels = tuple(labels)
    X, Y = _aligned(*train, labels)
    X_val, Y_val = _aligned(*val, labels)
    if X_val.shape[1] != X.shape[1]:
        raise DimensionError(f"train embeddings have d={X.shape[1]}, validation d={X_val.shape[1]}")

    supervised = ~np.all(np.isnan(Y), axis=1)
    if not supervised.any():
        raise TrainingError("no supervised signal: every label is missing")
    if not supervised.all():
        logging.info(f"Dropping {int((~supervised).sum())} training samples with every label missing")
        X, Y = X[supervised], Y[supervised]
    for j, label in enumerate(labels):
        known = Y[~np.isnan(Y[:, j]), j]
        if np.unique(known).size < 2:
            raise TrainingError(f"label {label} has a single class in the training set")

    layers = init_layers(spec.layer_sizes(X.shape[1], len(labels)), spec.seed)
    moments = [(np.zeros_like(w), np.zeros_like(b), np.zeros_like(w), np.zeros_like(b)) for w, b in layers]
    n = X.shape[0]
    step = 0
    log = TrainingLog()
    best_auc, best_layers, stale = -np.inf, None, 0

    for epoch in range(1, spec.max_epochs + 1):
        order = rng_for(spec.seed, epoch).permutation(n)
        batch_losses = []
        for start in range(0, n, spec.batch_size):
            batch = order[start:start + spec.batch_size]
            if np.all(np.isnan(Y[batch])):
                continue
            loss, gradients = loss_and_gradients(layers, X[batch], Y[batch])
            if not np.isfinite(loss):
                norms = [float(np.linalg.norm(g[0])) for g in gradients]
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}: loss={loss}, "
                                    f"gradient norms={norms}, learning rate={spec.learning_rate}")
            batch_losses.append(loss)
            step += 1
            layers, moments = _adam_step(layers, gradients, moments, step, spec.learning_rate)

        logits, _, _ = forward(layers, X_val)
        val_auc = macro_auc(special.expit(logits), Y_val, labels)
        train_loss = float(np.mean(batch_losses))
        log.record(epoch, train_loss, val_auc)
        logging.info(f"Epoch {epoch}: train loss {train_loss:.5f}, validation macro-AUC {val_auc:.4f}")

        if val_auc > best_auc:
            best_auc, best_layers, stale = val_auc, [(w.copy(), b.copy()) for w, b in layers], 0
            log.best_epoch = epoch
        else:
            stale += 1
            if stale >= spec.patience:
                log.stopped_early = True
                logging.info(f"Early stop after epoch {epoch}: no improvement for {spec.patience} epochs "
                             f"(best epoch {log.best_epoch}, macro-AUC {best_auc:.4f})")
                break

    return ProbeModel(layers=best_layers, label_names=labels), log


def _adam_step(layers, gradients, moments, step, learning_rate):
    updated_layers, updated_moments = [], []
    correction1 = 1.0 - BETA1 ** step
    correction2 = 1.0 - BETA2 ** step
    for (weight, bias), (grad_w, grad_b), (m_w, m_b, v_w, v_b) in zip(layers, gradients, moments):
        m_w = BETA1 * m_w + (1.0 - BETA1) * grad_w
        m_b = BETA1 * m_b + (1.0 - BETA1) * grad_b
        v_w = BETA2 * v_w + (1.0 - BETA2) * grad_w ** 2
        v_b = BETA2 * v_b + (1.0 - BETA2) * grad_b ** 2
        weight = weight - learning_rate * (m_w / correction1) / (np.sqrt(v_w / correction2) + EPSILON)
        bias = bias - learning_rate * (m_b / correction1) / (np.sqrt(v_b / correction2) + EPSILON)
        updated_layers.append((weight, bias))
        updated_moments.append((m_w, m_b, v_w, v_b))
    return updated_layers, updated_moments


def predict_probe(model, embeddings):
    X = embeddings.matrix
    if X.shape[1] != model.input_dim:
        raise DimensionError(f"probe expects d={model.input_dim}, embeddings have d={X.shape[1]}")
    logits, _, _ = forward(model.layers, X)
    # saturated logits would round to exactly 0 or 1
    scores = np.clip(special.expit(logits), np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
    return ScoreTable(embeddings.ids, model.label_names, scores)


def gradient_check(spec, X, Y, layers=None, step=GRADIENT_STEP):
    """Largest relative error between the analytic loss gradient and central differences.

    Relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-6). Parameters whose
    probe moves any downstream ReLU across its kink are skipped. Returns (max_error, checked, skipped).
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] > MAX_CHECK_SAMPLES:
        raise ValueError(f"gradient check takes at most {MAX_CHECK_SAMPLES} samples, got {X.shape[0]}")
    if spec.hidden_layers > MAX_CHECK_HIDDEN_LAYERS:
        raise ValueError(f"gradient check takes at most {MAX_CHECK_HIDDEN_LAYERS} hidden layers")
    if layers is None:
        layers = init_layers(spec.layer_sizes(X.shape[1], Y.shape[1]), spec.seed)
    layers = [(w.copy(), b.copy()) for w, b in layers]

    _, analytic = loss_and_gradients(layers, X, Y)
    _, layer_inputs, pre_activations = forward(layers, X)
    base_signs = [z > 0.0 for z in pre_activations[:-1]]

    def probe(index):
        # resume from the perturbed layer; the layers before it are unchanged
        logits, _, z = forward(layers, X, start=index, inputs=layer_inputs[index])
        crossed = any(np.any((zi > 0.0) != base_signs[index + k]) for k, zi in enumerate(z[:-1]))
        return masked_bce(logits, Y)[0], crossed

    worst, checked, skipped = 0.0, 0, 0
    for index, (weight, bias) in enumerate(layers):
        for param, grad in ((weight, analytic[index][0]), (bias, analytic[index][1])):
            for position in np.ndindex(param.shape):
                original = param[position]
                param[position] = original + step
                loss_plus, crossed_plus = probe(index)
                param[position] = original - step
                loss_minus, crossed_minus = probe(index)
                param[position] = original
                if crossed_plus or crossed_minus:
                    skipped += 1
                    continue
                numeric = (loss_plus - loss_minus) / (2.0 * step)
                exact = grad[position]
                error = abs(exact - numeric) / max(abs(exact), abs(numeric), GRADIENT_FLOOR)
                worst = max(worst, error)
                checked += 1

    if skipped:
        logging.info(f"Gradient check skipped {skipped} parameters whose probe crosses a ReLU kink")
    logging.debug(f"Gradient check: {checked} parameters, max relative error {worst:.3e}")
    return worst, checked, skipped
