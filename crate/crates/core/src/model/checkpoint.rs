//! Text checkpoints.
//!
//! ```text
//! REIDCKPT 1
//! dims <F> <H> <M>
//! dropout_rate <p>
//! bn_momentum <m>
//! bn_eps <eps>
//! mode train|eval
//! <tensor> <rows> <cols> <v_1> ... <v_rows*cols>     (row-major, one line each)
//! ```
//!
//! Tensors appear in the order w1, b1, gamma, beta, running_mean,
//! running_var, w2, b2; vectors have `rows = 1`. Values use shortest
//! round-trip decimal formatting, so a save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Mode, Model, BN_EPS};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "REIDCKPT";

const TENSORS: [&str; 8] = [
    "w1",
    "b1",
    "gamma",
    "beta",
    "running_mean",
    "running_var",
    "w2",
    "b2",
];

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(model, &mut file).map_err(|e| Error::io(path, e))
}

pub fn write_checkpoint(model: &Model, out: &mut impl Write) -> std::io::Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "{CHECKPOINT_MAGIC} 1");
    let _ = writeln!(
        text,
        "dims {} {} {}",
        model.input_dim(),
        model.hidden_dim(),
        model.embedding_dim()
    );
    let _ = writeln!(text, "dropout_rate {:?}", model.dropout_rate);
    let _ = writeln!(text, "bn_momentum {:?}", model.bn_momentum);
    let _ = writeln!(text, "bn_eps {BN_EPS:?}");
    let mode = match model.mode {
        Mode::Train => "train",
        Mode::Eval => "eval",
    };
    let _ = writeln!(text, "mode {mode}");

    let vectors = |v: &Array1<f64>| (1usize, v.len(), v.iter().copied().collect::<Vec<_>>());
    let matrix = |m: &Array2<f64>| (m.nrows(), m.ncols(), m.iter().copied().collect::<Vec<_>>());
    let tensors = [
        matrix(&model.w1),
        vectors(&model.b1),
        vectors(&model.gamma),
        vectors(&model.beta),
        vectors(&model.running_mean),
        vectors(&model.running_var),
        matrix(&model.w2),
        vectors(&model.b2),
    ];
    for (name, (rows, cols, values)) in TENSORS.iter().zip(tensors) {
        let _ = write!(text, "{name} {rows} {cols}");
        for v in values {
            let _ = write!(text, " {v:?}");
        }
        text.push('\n');
    }
    out.write_all(text.as_bytes())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(file, path)
}

pub fn read_checkpoint(reader: impl Read, origin: &Path) -> Result<Model> {
    let lines: Vec<String> = BufReader::new(reader)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(origin, e))?;
    let err = |line: usize, msg: String| Error::parse(origin, line, msg);
    if lines.len() != 6 + TENSORS.len() {
        return Err(err(
            lines.len().max(1),
            format!("expected {} lines", 6 + TENSORS.len()),
        ));
    }
    if lines[0] != format!("{CHECKPOINT_MAGIC} 1") {
        return Err(err(1, "not a version-1 checkpoint".into()));
    }

    fn field<'a>(line: &'a str, key: &str) -> Option<Vec<&'a str>> {
        let mut parts = line.split(' ');
        (parts.next() == Some(key)).then(|| parts.collect())
    }
    fn num<T: std::str::FromStr>(s: &str) -> Option<T> {
        s.parse().ok()
    }

    let dims: Vec<usize> = field(&lines[1], "dims")
        .and_then(|v| v.into_iter().map(num).collect::<Option<Vec<_>>>())
        .filter(|v| v.len() == 3)
        .ok_or_else(|| err(2, "bad dims line".into()))?;
    let scalar = |i: usize, key: &str| -> Result<f64> {
        field(&lines[i], key)
            .filter(|v| v.len() == 1)
            .and_then(|v| num::<f64>(v[0]))
            .ok_or_else(|| err(i + 1, format!("bad `{key}` line")))
    };
    let dropout_rate = scalar(2, "dropout_rate")?;
    let bn_momentum = scalar(3, "bn_momentum")?;
    if scalar(4, "bn_eps")? != BN_EPS {
        return Err(err(5, "unsupported batch-norm epsilon".into()));
    }
    let mode = match field(&lines[5], "mode").as_deref() {
        Some(["train"]) => Mode::Train,
        Some(["eval"]) => Mode::Eval,
        _ => return Err(err(6, "bad mode line".into())),
    };

    let (f, h, m) = (dims[0], dims[1], dims[2]);
    let shapes = [
        (f, h),
        (1, h),
        (1, h),
        (1, h),
        (1, h),
        (1, h),
        (h, m),
        (1, m),
    ];
    let mut tensors = Vec::with_capacity(TENSORS.len());
    for (k, (name, shape)) in TENSORS.iter().zip(shapes).enumerate() {
        let lineno = 7 + k;
        let parts = field(&lines[6 + k], name)
            .ok_or_else(|| err(lineno, format!("expected tensor `{name}`")))?;
        if parts.len() < 2
            || num::<usize>(parts[0]) != Some(shape.0)
            || num::<usize>(parts[1]) != Some(shape.1)
        {
            return Err(err(lineno, format!("tensor `{name}` has wrong shape")));
        }
        let values: Vec<f64> = parts[2..]
            .iter()
            .map(|s| num::<f64>(s).filter(|v| v.is_finite()))
            .collect::<Option<_>>()
            .ok_or_else(|| err(lineno, format!("bad value in `{name}`")))?;
        if values.len() != shape.0 * shape.1 {
            return Err(err(
                lineno,
                format!("tensor `{name}` has {} values", values.len()),
            ));
        }
        tensors.push(values);
    }
    let mut it = tensors.into_iter();
    let mut next_matrix =
        |r: usize, c: usize| Array2::from_shape_vec((r, c), it.next().unwrap()).unwrap();
    let w1 = next_matrix(f, h);
    let rest: Vec<Array1<f64>> = (0..5)
        .map(|_| next_matrix(1, h).into_shape_with_order(h).unwrap())
        .collect();
    let w2 = next_matrix(h, m);
    let b2 = next_matrix(1, m).into_shape_with_order(m).unwrap();
    let [b1, gamma, beta, running_mean, running_var]: [Array1<f64>; 5] = rest.try_into().unwrap();
    if running_var.iter().any(|&v| v < 0.0) {
        return Err(err(12, "negative running variance".into()));
    }
    Ok(Model {
        w1,
        b1,
        gamma,
        beta,
        running_mean,
        running_var,
        w2,
        b2,
        bn_momentum,
        dropout_rate,
        mode,
    })
}
