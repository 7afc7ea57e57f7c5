/**
 * The richer topic-classifier variant: a one-hidden-layer softmax network
 * over sentence embeddings (two trainable weight layers, standing in for
 * fine-tuning a language model's last two layers plus its output head).
 *
 * Trained full-batch with plain gradient descent; deterministic given the
 * seed.  Label space is numTopics + 1, the last label meaning "no topic".
 */

export interface MlpTopicClassifier {
  w1: Float64Array; // hidden x dim
  b1: Float64Array;
  w2: Float64Array; // labels x hidden
  b2: Float64Array;
  dim: number;
  hidden: number;
  numLabels: number;
}

/** splitmix64-backed uniform floats for reproducible init. */
function makeRng(seed: number): () => number {
  const MASK = (1n << 64n) - 1n;
  let state = BigInt(seed) & MASK;
  return () => {
    state = (state + 0x9e3779b97f4a7c15n) & MASK;
    let z = state;
    z = ((z ^ (z >> 30n)) * 0xbf58476d1ce4e5b9n) & MASK;
    z = ((z ^ (z >> 27n)) * 0x94d049bb133111ebn) & MASK;
    z = (z ^ (z >> 31n)) & MASK;
    return Number(z >> 11n) * 2 ** -53;
  };
}

function softmaxInPlace(logits: Float64Array): void {
  let max = -Infinity;
  for (const v of logits) max = Math.max(max, v);
  let total = 0;
  for (let i = 0; i < logits.length; i++) {
    logits[i] = Math.exp(logits[i] - max);
    total += logits[i];
  }
  for (let i = 0; i < logits.length; i++) logits[i] /= total;
}

export function probabilities(model: MlpTopicClassifier, x: Float64Array): Float64Array {
  const { dim, hidden, numLabels } = model;
  const h = new Float64Array(hidden);
  for (let j = 0; j < hidden; j++) {
    let acc = model.b1[j];
    for (let i = 0; i < dim; i++) acc += model.w1[j * dim + i] * x[i];
    h[j] = acc > 0 ? acc : 0; // relu
  }
  const logits = new Float64Array(numLabels);
  for (let c = 0; c < numLabels; c++) {
    let acc = model.b2[c];
    for (let j = 0; j < hidden; j++) acc += model.w2[c * hidden + j] * h[j];
    logits[c] = acc;
  }
  softmaxInPlace(logits);
  return logits;
}

export function assign(model: MlpTopicClassifier, x: Float64Array): [number, number] {
  const probs = probabilities(model, x);
  let best = 0;
  for (let c = 1; c < probs.length; c++) {
    if (probs[c] > probs[best]) best = c;
  }
  return [best, probs[best]];
}

export interface TrainOptions {
  hidden?: number;
  epochs?: number;
  lr?: number;
  seed?: number;
}

export function trainTopicClassifier(
  X: Float64Array[],
  y: number[],
  numLabels: number,
  opts: TrainOptions = {},
): MlpTopicClassifier {
  const { hidden = 32, epochs = 300, lr = 0.3, seed = 0 } = opts;
  if (X.length === 0) {
    throw new Error("trainTopicClassifier: no samples");
  }
  if (new Set(y).size < 2) {
    throw new Error("trainTopicClassifier: need at least two distinct labels");
  }
  const dim = X[0].length;
  const rng = makeRng(seed + 1);
  const model: MlpTopicClassifier = {
    w1: new Float64Array(hidden * dim),
    b1: new Float64Array(hidden),
    w2: new Float64Array(numLabels * hidden),
    b2: new Float64Array(numLabels),
    dim,
    hidden,
    numLabels,
  };
  const bound1 = Math.sqrt(6 / (dim + hidden));
  for (let i = 0; i < model.w1.length; i++) model.w1[i] = (2 * rng() - 1) * bound1;
  const bound2 = Math.sqrt(6 / (hidden + numLabels));
  for (let i = 0; i < model.w2.length; i++) model.w2[i] = (2 * rng() - 1) * bound2;

  const n = X.length;
  const gw1 = new Float64Array(hidden * dim);
  const gb1 = new Float64Array(hidden);
  const gw2 = new Float64Array(numLabels * hidden);
  const gb2 = new Float64Array(numLabels);
  const h = new Float64Array(hidden);

  for (let epoch = 0; epoch < epochs; epoch++) {
    gw1.fill(0); gb1.fill(0); gw2.fill(0); gb2.fill(0);
    let loss = 0;
    for (let s = 0; s < n; s++) {
      const x = X[s];
      for (let j = 0; j < hidden; j++) {
        let acc = model.b1[j];
        for (let i = 0; i < dim; i++) acc += model.w1[j * dim + i] * x[i];
        h[j] = acc > 0 ? acc : 0;
      }
      const logits = new Float64Array(numLabels);
      for (let c = 0; c < numLabels; c++) {
        let acc = model.b2[c];
        for (let j = 0; j < hidden; j++) acc += model.w2[c * hidden + j] * h[j];
        logits[c] = acc;
      }
      softmaxInPlace(logits);
      loss -= Math.log(Math.max(logits[y[s]], 1e-300));
      // delta at the output, then backprop one layer
      const hiddenGrad = new Float64Array(hidden);
      for (let c = 0; c < numLabels; c++) {
        const delta = (logits[c] - (c === y[s] ? 1 : 0)) / n;
        gb2[c] += delta;
        for (let j = 0; j < hidden; j++) {
          gw2[c * hidden + j] += delta * h[j];
          hiddenGrad[j] += delta * model.w2[c * hidden + j];
        }
      }
      for (let j = 0; j < hidden; j++) {
        if (h[j] <= 0) continue; // relu gate
        gb1[j] += hiddenGrad[j];
        for (let i = 0; i < dim; i++) gw1[j * dim + i] += hiddenGrad[j] * x[i];
      }
    }
    if (!Number.isFinite(loss)) {
      throw new Error("topic classifier training diverged");
    }
    for (let i = 0; i < model.w1.length; i++) model.w1[i] -= lr * (gw1[i] + 1e-4 * model.w1[i]);
    for (let j = 0; j < hidden; j++) model.b1[j] -= lr * gb1[j];
    for (let i = 0; i < model.w2.length; i++) model.w2[i] -= lr * (gw2[i] + 1e-4 * model.w2[i]);
    for (let c = 0; c < numLabels; c++) model.b2[c] -= lr * gb2[c];
  }
  return model;
}
