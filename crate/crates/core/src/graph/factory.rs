//! One factory per layer kind.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::spec::{LayerKind, LayerOpSpec, LayerSpec, ModelSpec};
use crate::graph::weights::WeightStore;
use crate::graph::{BoundLayer, LayerOp};
use crate::layers::{self, BatchNormParams, Conv2dParams, DenseParams, PoolParams, QuantSlots};
use crate::tensor::Tensor;

pub(crate) struct FactoryInput<'a> {
    pub spec: &'a LayerSpec,
    pub id: &'a str,
    pub input_shape: &'a [usize],
    pub weights: &'a WeightStore,
    pub slots: QuantSlots,
}

pub(crate) type LayerFactory = fn(FactoryInput<'_>) -> Result<BoundLayer>;

pub(crate) fn factory_for(kind: LayerKind) -> LayerFactory {
    match kind {
        LayerKind::Conv2d => conv2d,
        LayerKind::FullyConnected => fully_connected,
        LayerKind::Maxpool2d => maxpool2d,
        LayerKind::Relu => relu,
        LayerKind::Batchnorm => batchnorm,
        LayerKind::Softmax => softmax,
        LayerKind::Flatten => flatten,
    }
}

type ParamShapes = Vec<(&'static str, Vec<usize>)>;

/// Parameter tensors (name, shape) of a layer plus its per-sample output shape.
pub(crate) fn layer_shapes(spec: &LayerSpec, input: &[usize]) -> Result<(ParamShapes, Vec<usize>)> {
    let shape_err = |reason: String| Error::InvalidShape {
        shape: input.to_vec(),
        reason,
    };
    match &spec.op {
        LayerOpSpec::Conv2d {
            filters,
            kernel_size,
            stride,
            padding,
            bias,
        } => {
            let [h, w, c] = input else {
                return Err(shape_err("conv2d expects [H, W, C] input".into()));
            };
            let (oh, _) = layers::output_dim(*h, *kernel_size, *stride, *padding)?;
            let (ow, _) = layers::output_dim(*w, *kernel_size, *stride, *padding)?;
            let mut params = vec![("weights", vec![*kernel_size, *kernel_size, *c, *filters])];
            if *bias {
                params.push(("biases", vec![*filters]));
            }
            Ok((params, vec![oh, ow, *filters]))
        }
        LayerOpSpec::FullyConnected { units, bias } => {
            let [n_in] = input else {
                return Err(shape_err(
                    "fully_connected expects flat input; add a flatten layer".into(),
                ));
            };
            let mut params = vec![("weights", vec![*n_in, *units])];
            if *bias {
                params.push(("biases", vec![*units]));
            }
            Ok((params, vec![*units]))
        }
        LayerOpSpec::Maxpool2d {
            window,
            stride,
            padding,
        } => {
            let [h, w, c] = input else {
                return Err(shape_err("maxpool2d expects [H, W, C] input".into()));
            };
            let stride = stride.unwrap_or(*window);
            let (oh, _) = layers::output_dim(*h, *window, stride, *padding)?;
            let (ow, _) = layers::output_dim(*w, *window, stride, *padding)?;
            Ok((Vec::new(), vec![oh, ow, *c]))
        }
        LayerOpSpec::Batchnorm { .. } => {
            let c = *input
                .last()
                .ok_or_else(|| shape_err("batchnorm needs a channel axis".into()))?;
            let params = ["gamma", "beta", "moving_mean", "moving_variance"]
                .into_iter()
                .map(|n| (n, vec![c]))
                .collect();
            Ok((params, input.to_vec()))
        }
        LayerOpSpec::Relu | LayerOpSpec::Softmax => Ok((Vec::new(), input.to_vec())),
        LayerOpSpec::Flatten => Ok((Vec::new(), vec![input.iter().product()])),
    }
}

fn load_params(input: &FactoryInput<'_>) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let (shapes, out) = layer_shapes(input.spec, input.input_shape)?;
    let tensors = shapes
        .iter()
        .map(|(name, shape)| input.weights.require(&format!("{}/{name}", input.id), shape))
        .collect::<Result<Vec<_>>>()?;
    Ok((tensors, out))
}

fn bound(input: FactoryInput<'_>, op: LayerOp, output_shape: Vec<usize>) -> BoundLayer {
    BoundLayer {
        id: input.id.to_string(),
        kind: input.spec.op.kind(),
        op,
        slots: input.slots,
        input_shape: input.input_shape.to_vec(),
        output_shape,
    }
}

fn conv2d(input: FactoryInput<'_>) -> Result<BoundLayer> {
    let LayerOpSpec::Conv2d { stride, padding, .. } = input.spec.op else {
        unreachable!("conv2d factory called for {:?}", input.spec.op.kind())
    };
    let (mut tensors, out) = load_params(&input)?;
    let bias = (tensors.len() == 2).then(|| tensors.pop().expect("two tensors"));
    let kernel = tensors.pop().expect("kernel");
    let mut params = Conv2dParams {
        kernel,
        bias,
        stride,
        padding,
    };
    params.validate(input.id)?;
    if let Some(q) = &input.slots.intrinsic {
        params = params.quantized(q.as_ref(), input.id)?;
    }
    Ok(bound(input, LayerOp::Conv2d(params), out))
}

fn fully_connected(input: FactoryInput<'_>) -> Result<BoundLayer> {
    let (mut tensors, out) = load_params(&input)?;
    let bias = (tensors.len() == 2).then(|| tensors.pop().expect("two tensors"));
    let weight = tensors.pop().expect("weight");
    let mut params = DenseParams { weight, bias };
    params.validate(input.id)?;
    if let Some(q) = &input.slots.intrinsic {
        params = params.quantized(q.as_ref(), input.id)?;
    }
    Ok(bound(input, LayerOp::FullyConnected(params), out))
}

fn maxpool2d(input: FactoryInput<'_>) -> Result<BoundLayer> {
    let LayerOpSpec::Maxpool2d {
        window,
        stride,
        padding,
    } = input.spec.op
    else {
        unreachable!("maxpool2d factory called for {:?}", input.spec.op.kind())
    };
    let (_, out) = layer_shapes(input.spec, input.input_shape)?;
    let params = PoolParams {
        window,
        stride: stride.unwrap_or(window),
        padding,
    };
    Ok(bound(input, LayerOp::Maxpool2d(params), out))
}

fn relu(input: FactoryInput<'_>) -> Result<BoundLayer> {
    let out = input.input_shape.to_vec();
    Ok(bound(input, LayerOp::Relu, out))
}

fn batchnorm(input: FactoryInput<'_>) -> Result<BoundLayer> {
    let LayerOpSpec::Batchnorm { epsilon } = input.spec.op else {
        unreachable!("batchnorm factory called for {:?}", input.spec.op.kind())
    };
    let (tensors, out) = load_params(&input)?;
    let [gamma, beta, moving_mean, moving_variance]: [Tensor; 4] = tensors.try_into().expect("four batchnorm tensors");
    let params = BatchNormParams {
        gamma,
        beta,
        moving_mean,
        moving_variance,
        epsilon,
    };
    params.validate(input.id)?;
    if input.slots.intrinsic.is_some() {
        warn!(
            "{}: intrinsic quantization of batchnorm is not supported; computing in floating point",
            input.id
        );
    }
    Ok(bound(input, LayerOp::Batchnorm(params), out))
}

fn softmax(input: FactoryInput<'_>) -> Result<BoundLayer> {
    if input.slots.intrinsic.is_some() {
        warn!(
            "{}: softmax is always computed in floating point; intrinsic quantizer ignored",
            input.id
        );
    }
    let out = input.input_shape.to_vec();
    Ok(bound(input, LayerOp::Softmax, out))
}

fn flatten(input: FactoryInput<'_>) -> Result<BoundLayer> {
    let out = vec![input.input_shape.iter().product()];
    Ok(bound(input, LayerOp::Flatten, out))
}

pub(crate) fn init_weights(spec: &ModelSpec, seed: u64) -> Result<WeightStore> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    let mut shape = spec.input_shape.clone();
    for (i, layer) in spec.layers.iter().enumerate() {
        let id = spec.layer_id(i);
        let (params, out) = layer_shapes(layer, &shape)?;
        for (name, pshape) in params {
            let n: usize = pshape.iter().product();
            let data = match name {
                "weights" => {
                    let (fan_in, fan_out) = match pshape.as_slice() {
                        [kh, kw, c, f] => (kh * kw * c, kh * kw * f),
                        [a, b] => (*a, *b),
                        _ => unreachable!("weights are rank 2 or 4"),
                    };
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
                }
                "gamma" | "moving_variance" => vec![1.0; n],
                _ => vec![0.0; n],
            };
            store.insert(format!("{id}/{name}"), Tensor::new(pshape, data)?);
        }
        shape = out;
    }
    Ok(store)
}
