//! Finite-difference checks for every differentiable tape operation and for
//! the model's end-to-end training losses, on a minimal configuration.

use std::collections::HashMap;

use mintiqa::dataset::RgbImage;
use mintiqa::model::{Model, ModelConfig, Vocab};
use mintiqa::tensor::Result;
use mintiqa::train::{l1_loss_var, pairwise_loss_var};
use mintiqa::{grad_check, GradCheckReport, Graph, Tape, Tensor, Var};

pub const TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;
// Model losses are O(10); a wider step keeps round-off in the difference quotient below the tolerance.
const MODEL_STEP: f64 = 1e-4;

/// Deterministic, non-degenerate fill so no gradient vanishes by symmetry.
fn filled(shape: &[usize], phase: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| (1.3 * i as f64 + phase).sin()).collect()).unwrap()
}

fn positive(shape: &[usize], phase: f64) -> Tensor {
    let t = filled(shape, phase);
    Tensor::new(shape.to_vec(), t.data().iter().map(|v| 1.5 + v).collect()).unwrap()
}

/// Weighted mean with fixed weights: a scalar whose gradient exercises every element.
fn reduce(tape: &mut Tape, v: Var) -> Result<Var> {
    let w = tape.constant(filled(tape.shape(v), 0.37));
    let p = tape.mul(v, w)?;
    Ok(tape.mean(p))
}

fn check(f: impl Fn(&mut Tape, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> GradCheckReport {
    grad_check(f, inputs, STEP, TOL).unwrap()
}

/// One report per kernel operation.
pub fn op_reports() -> Vec<(&'static str, GradCheckReport)> {
    let a = filled(&[3, 4], 0.1);
    let b = filled(&[3, 4], 1.7);
    let m = filled(&[4, 2], 2.9);
    let bias = filled(&[4], 0.5);
    let mut out = vec![
        (
            "matmul",
            check(
                |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    reduce(t, y)
                },
                &[a.clone(), m],
            ),
        ),
        (
            "add",
            check(
                |t, v| {
                    let y = t.add(v[0], v[1])?;
                    reduce(t, y)
                },
                &[a.clone(), b.clone()],
            ),
        ),
        (
            "sub",
            check(
                |t, v| {
                    let y = t.sub(v[0], v[1])?;
                    reduce(t, y)
                },
                &[a.clone(), b.clone()],
            ),
        ),
        (
            "add_bias",
            check(
                |t, v| {
                    let y = t.add_bias(v[0], v[1])?;
                    reduce(t, y)
                },
                &[a.clone(), bias.clone()],
            ),
        ),
        (
            "mul",
            check(
                |t, v| {
                    let y = t.mul(v[0], v[1])?;
                    reduce(t, y)
                },
                &[a.clone(), b.clone()],
            ),
        ),
        (
            "scale",
            check(
                |t, v| {
                    let y = t.scale(v[0], -2.5);
                    reduce(t, y)
                },
                std::slice::from_ref(&a),
            ),
        ),
        (
            "concat_rows",
            check(
                |t, v| {
                    let y = t.concat(&[v[0], v[1], v[0]], 0)?;
                    reduce(t, y)
                },
                &[a.clone(), b.clone()],
            ),
        ),
        (
            "concat_cols",
            check(
                |t, v| {
                    let y = t.concat(&[v[0], v[1]], 1)?;
                    reduce(t, y)
                },
                &[a.clone(), filled(&[3, 2], 0.8)],
            ),
        ),
        (
            "slice_rows",
            check(
                |t, v| {
                    let y = t.slice(v[0], 0, 1, 2)?;
                    reduce(t, y)
                },
                std::slice::from_ref(&a),
            ),
        ),
        (
            "slice_cols",
            check(
                |t, v| {
                    let y = t.slice(v[0], 1, 1, 3)?;
                    reduce(t, y)
                },
                std::slice::from_ref(&a),
            ),
        ),
        (
            "transpose",
            check(
                |t, v| {
                    let y = t.transpose(v[0])?;
                    reduce(t, y)
                },
                std::slice::from_ref(&a),
            ),
        ),
        (
            "mean",
            check(
                |t, v| {
                    let y = t.mean(v[0]);
                    Ok(t.scale(y, 3.0))
                },
                std::slice::from_ref(&a),
            ),
        ),
        (
            "mean_axis0",
            check(
                |t, v| {
                    let y = t.mean_axis(v[0], 0)?;
                    reduce(t, y)
                },
                std::slice::from_ref(&a),
            ),
        ),
        (
            "mean_axis1",
            check(
                |t, v| {
                    let y = t.mean_axis(v[0], 1)?;
                    reduce(t, y)
                },
                std::slice::from_ref(&a),
            ),
        ),
        (
            "softmax",
            check(
                |t, v| {
                    let y = t.softmax(v[0])?;
                    reduce(t, y)
                },
                std::slice::from_ref(&a),
            ),
        ),
        (
            "layer_norm",
            check(
                |t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2])?;
                    reduce(t, y)
                },
                &[a.clone(), positive(&[4], 0.2), bias.clone()],
            ),
        ),
        (
            "gelu",
            check(
                |t, v| {
                    let y = t.gelu(v[0]);
                    reduce(t, y)
                },
                std::slice::from_ref(&a),
            ),
        ),
        (
            "embedding",
            check(
                |t, v| {
                    let y = t.embedding(v[0], &[2, 0, 2, 4])?;
                    reduce(t, y)
                },
                &[filled(&[5, 3], 0.4)],
            ),
        ),
        (
            "cross_entropy",
            check(|t, v| t.cross_entropy(v[0], &[3, 0, 1]), std::slice::from_ref(&a)),
        ),
        ("l1", check(|t, v| t.l1(v[0], v[1]), &[a.clone(), b.clone()])),
        (
            "sigmoid",
            check(
                |t, v| {
                    let y = t.sigmoid(v[0]);
                    reduce(t, y)
                },
                std::slice::from_ref(&a),
            ),
        ),
        (
            "log_sigmoid",
            check(
                |t, v| {
                    let y = t.log_sigmoid(v[0]);
                    reduce(t, y)
                },
                std::slice::from_ref(&a),
            ),
        ),
        (
            "log",
            check(
                |t, v| {
                    let y = t.log(v[0])?;
                    reduce(t, y)
                },
                &[positive(&[3, 4], 0.9)],
            ),
        ),
        (
            "sum_of",
            check(
                |t, v| {
                    let y = t.sum_of(&[v[0], v[1], v[0]])?;
                    reduce(t, y)
                },
                &[a.clone(), b.clone()],
            ),
        ),
    ];
    // Attention core: softmax(q kᵀ / √d) v with a causal mask added before the softmax.
    let mask = Tensor::new(vec![3, 3], vec![0.0, -1e9, -1e9, 0.0, 0.0, -1e9, 0.0, 0.0, 0.0]).unwrap();
    out.push((
        "masked_attention",
        check(
            move |t, v| {
                let kt = t.transpose(v[1])?;
                let s = t.matmul(v[0], kt)?;
                let s = t.scale(s, 0.5);
                let mk = t.constant(mask.clone());
                let s = t.add(s, mk)?;
                let p = t.softmax(s)?;
                let y = t.matmul(p, v[2])?;
                reduce(t, y)
            },
            &[a.clone(), b.clone(), filled(&[3, 4], 2.2)],
        ),
    ));
    out
}

pub fn minimal_model() -> Model {
    let vocab = Vocab::build([
        "a red cube on a table style: realistic; content: atmosphere:",
        "how is the quality of the image? very clear",
    ]);
    let config = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_image_layers: 1,
        n_text_layers: 1,
        n_qformer_layers: 1,
        n_decoder_layers: 1,
        n_queries: 2,
        patch_size: 4,
        image_size: 8,
        vocab: vocab.tokens().to_vec(),
        init_seed: 3,
        ..Default::default()
    };
    let mut model = Model::new(config).unwrap();
    // Zero-initialised weights hide gradient paths behind exact zeros; perturb them.
    for (i, (name, t)) in model.params.iter_mut().enumerate() {
        if name.starts_with("zero_conv") || name.ends_with(".b") {
            for (j, x) in t.data_mut().iter_mut().enumerate() {
                *x = 0.05 * ((i * 31 + j) as f64 * 0.7).sin();
            }
        }
    }
    model.widen_heads().unwrap();
    model
}

pub fn test_image(size: usize, phase: f64) -> RgbImage {
    RgbImage::new(
        size,
        size,
        (0..size * size * 3)
            .map(|i| 0.5 + 0.4 * (0.9 * i as f64 + phase).sin())
            .collect(),
    )
}

type Loss<'a> = dyn Fn(&Model, &mut Graph<'_>) -> Result<Var> + 'a;

/// Checks a model loss over every parameter it depends on.
fn model_check(model: &Model, loss: &Loss<'_>) -> GradCheckReport {
    // Discover the parameters that receive a gradient.
    let mut g = Graph::new(&model.params);
    let l = loss(model, &mut g).unwrap();
    g.tape.backward(l).unwrap();
    let names: Vec<String> = g.grads().into_keys().collect();
    assert!(!names.is_empty());
    let inputs: Vec<Tensor> = names.iter().map(|n| model.params.get(n).unwrap().clone()).collect();
    grad_check(
        |tape, vars| {
            let bound: HashMap<String, Var> = names.iter().cloned().zip(vars.iter().copied()).collect();
            let mut g = Graph::with_bound(std::mem::take(tape), &model.params, bound);
            let l = loss(model, &mut g)?;
            *tape = g.into_tape();
            Ok(l)
        },
        &inputs,
        MODEL_STEP,
        TOL,
    )
    .unwrap()
}

fn err(e: mintiqa::ModelError) -> mintiqa::TensorError {
    mintiqa::TensorError::Contract(e.to_string())
}

/// The four training objectives, differentiated through the whole network.
pub fn end_to_end_reports() -> Vec<(&'static str, GradCheckReport)> {
    let model = minimal_model();
    let img_a = test_image(8, 0.0);
    let img_b = test_image(8, 1.1);
    let text = model.compose("a red cube on a table");
    let ids = model.text_ids(&text).unwrap();
    let question = "how is the quality of the image?";
    let q_ids = model.text_ids(question).unwrap();
    let answer_ids = model.text_ids("very clear").unwrap();

    let score_l1 = |m: &Model, g: &mut Graph<'_>| -> Result<Var> {
        let path = m.score_path(g, &ids, &img_a).map_err(err)?;
        let preds: Vec<Var> = (0..3)
            .map(|i| m.head(g, i, path.pooled))
            .collect::<std::result::Result<_, _>>()
            .map_err(err)?;
        l1_loss_var(&mut g.tape, &preds, &[10.0, 90.0, 37.0]).map_err(|e| mintiqa::TensorError::Contract(e.to_string()))
    };
    let pairwise = |m: &Model, g: &mut Graph<'_>| -> Result<Var> {
        let pa = m.score_path(g, &ids, &img_a).map_err(err)?;
        let pb = m.score_path(g, &ids, &img_b).map_err(err)?;
        let sa = m.head(g, 0, pa.pooled).map_err(err)?;
        let sb = m.head(g, 0, pb.pooled).map_err(err)?;
        // Scaled down so the logistic is not saturated.
        let sa = g.tape.scale(sa, 0.01);
        let sb = g.tape.scale(sb, 0.01);
        pairwise_loss_var(&mut g.tape, &[(sa, sb)]).map_err(|e| mintiqa::TensorError::Contract(e.to_string()))
    };
    let answer = |m: &Model, g: &mut Graph<'_>| -> Result<Var> {
        let path = m.score_path(g, &ids, &img_a).map_err(err)?;
        let rep = m
            .instruction_path(g, Some(path.queries), &q_ids, path.image)
            .map_err(err)?;
        m.answer_loss(g, rep, &q_ids, &answer_ids).map_err(err)
    };
    let feedback = |m: &Model, g: &mut Graph<'_>| -> Result<Var> {
        let path = m.score_path(g, &ids, &img_a).map_err(err)?;
        let rep = m
            .instruction_path(g, Some(path.queries), &q_ids, path.image)
            .map_err(err)?;
        let pooled_inst = m.pool(g, rep).map_err(err)?;
        let s = m.feedback_head(g, 1, path.pooled, pooled_inst).map_err(err)?;
        let target = g.tape.constant(Tensor::full(&[1, 1], 12.0));
        g.tape.l1(s, target)
    };
    vec![
        ("end_to_end_score_l1", model_check(&model, &score_l1)),
        ("end_to_end_pairwise", model_check(&model, &pairwise)),
        ("end_to_end_answer", model_check(&model, &answer)),
        ("end_to_end_feedback", model_check(&model, &feedback)),
    ]
}
