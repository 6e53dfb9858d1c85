//! Text checkpoints.
//!
//! ```text
//! #fkt-ckpt v1 d=<input> hidden=<h> feature=<f> cls_hidden=<k> c=<classes> seed=<s> step=<t>
//! minority <ids...|->
//! block <name> <rows> <cols>
//! <rows lines of cols space-separated values>
//! ...
//! ```
//!
//! Blocks appear in the order gen.w1 gen.b1 gen.w2 gen.b2 cls.w1 cls.b1
//! cls.w2 cls.b2 proto.vectors proto.counts proto.amended. Vectors are
//! stored as a single row.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};

use crate::dataset::write_values;
use crate::error::{Error, Result};

use super::{ClassifierParams, GeneratorParams, NetworkDims, PrototypeTable};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub dims: NetworkDims,
    pub generator: GeneratorParams,
    pub classifier: ClassifierParams,
    pub prototypes: PrototypeTable,
    pub minority: Vec<usize>,
    pub seed: u64,
    pub step: u64,
}

impl ModelState {
    pub fn new(
        dims: NetworkDims,
        generator: GeneratorParams,
        classifier: ClassifierParams,
        minority: Vec<usize>,
        seed: u64,
    ) -> Self {
        Self {
            prototypes: PrototypeTable::empty(dims.classes, dims.feature),
            dims,
            generator,
            classifier,
            minority,
            seed,
            step: 0,
        }
    }

    pub fn to_text(&self) -> String {
        let d = &self.dims;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "#fkt-ckpt v1 d={} hidden={} feature={} cls_hidden={} c={} seed={} step={}",
            d.input, d.hidden, d.feature, d.cls_hidden, d.classes, self.seed, self.step
        );
        out.push_str("minority");
        if self.minority.is_empty() {
            out.push_str(" -");
        }
        for c in &self.minority {
            let _ = write!(out, " {c}");
        }
        out.push('\n');

        let g = &self.generator;
        let c = &self.classifier;
        write_block(&mut out, "gen.w1", g.w1.view());
        write_vector(&mut out, "gen.b1", &g.b1);
        write_block(&mut out, "gen.w2", g.w2.view());
        write_vector(&mut out, "gen.b2", &g.b2);
        write_block(&mut out, "cls.w1", c.w1.view());
        write_vector(&mut out, "cls.b1", &c.b1);
        write_block(&mut out, "cls.w2", c.w2.view());
        write_vector(&mut out, "cls.b2", &c.b2);
        write_block(&mut out, "proto.vectors", self.prototypes.vectors.view());
        let counts: Array1<f64> = self.prototypes.counts.iter().map(|&n| n as f64).collect();
        write_vector(&mut out, "proto.counts", &counts);
        let amended = Array1::from_elem(1, if self.prototypes.amended { 1.0 } else { 0.0 });
        write_vector(&mut out, "proto.amended", &amended);
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        Reader::new(text, path).read()
    }
}

fn write_block(out: &mut String, name: &str, m: ArrayView2<'_, f64>) {
    let _ = writeln!(out, "block {name} {} {}", m.nrows(), m.ncols());
    for row in m.rows() {
        write_values(out, row);
        out.push('\n');
    }
}

fn write_vector(out: &mut String, name: &str, v: &Array1<f64>) {
    write_block(out, name, v.view().insert_axis(ndarray::Axis(0)));
}

pub fn save_checkpoint(model: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model.to_text()).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ModelState::from_text(&text, path)
}

struct Reader<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    path: &'a Path,
    last: usize,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str, path: &'a Path) -> Self {
        Self {
            lines: text.lines().enumerate().peekable(),
            path,
            last: 0,
        }
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }

    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        match self.lines.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok((i + 1, l))
            }
            None => Err(self.err(self.last + 1, "unexpected end of checkpoint")),
        }
    }

    fn read(mut self) -> Result<ModelState> {
        let (ln, header) = self.next_line()?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("#fkt-ckpt") || parts.next() != Some("v1") {
            return Err(self.err(ln, "not an fkt v1 checkpoint"));
        }
        let mut fields = std::collections::HashMap::new();
        for kv in parts {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| self.err(ln, format!("malformed field `{kv}`")))?;
            let v: u64 = v
                .parse()
                .map_err(|e| self.err(ln, format!("field `{k}`: {e}")))?;
            fields.insert(k.to_string(), v);
        }
        let get = |k: &str| -> Result<u64> {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| self.err(ln, format!("missing `{k}=`")))
        };
        let dims = NetworkDims {
            input: get("d")? as usize,
            hidden: get("hidden")? as usize,
            feature: get("feature")? as usize,
            cls_hidden: get("cls_hidden")? as usize,
            classes: get("c")? as usize,
        };
        dims.validate().map_err(|e| self.err(ln, e.to_string()))?;
        let seed = get("seed")?;
        let step = get("step")?;

        let (ln, mline) = self.next_line()?;
        let mut toks = mline.split_whitespace();
        if toks.next() != Some("minority") {
            return Err(self.err(ln, "expected `minority` line"));
        }
        let mut minority = Vec::new();
        for t in toks {
            if t == "-" {
                continue;
            }
            let c: usize = t
                .parse()
                .map_err(|e| self.err(ln, format!("minority class `{t}`: {e}")))?;
            if c >= dims.classes {
                return Err(self.err(ln, format!("minority class {c} >= c={}", dims.classes)));
            }
            minority.push(c);
        }

        let mut gen = GeneratorParams::zeros(dims.input, dims.hidden, dims.feature);
        let mut cls = ClassifierParams::zeros(dims.feature, dims.cls_hidden, dims.classes);
        gen.w1 = self.block("gen.w1", dims.input, dims.hidden)?;
        gen.b1 = self.vector("gen.b1", dims.hidden)?;
        gen.w2 = self.block("gen.w2", dims.hidden, dims.feature)?;
        gen.b2 = self.vector("gen.b2", dims.feature)?;
        cls.w1 = self.block("cls.w1", dims.feature, dims.cls_hidden)?;
        cls.b1 = self.vector("cls.b1", dims.cls_hidden)?;
        cls.w2 = self.block("cls.w2", dims.cls_hidden, dims.classes)?;
        cls.b2 = self.vector("cls.b2", dims.classes)?;
        let vectors = self.block("proto.vectors", dims.classes, dims.feature)?;
        let counts_line = self.last + 1;
        let counts = self.vector("proto.counts", dims.classes)?;
        let counts = counts
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(self.err(counts_line, format!("bad prototype count {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let amended = self.vector("proto.amended", 1)?[0] != 0.0;
        while let Some((i, l)) = self.lines.next() {
            if !l.trim().is_empty() {
                return Err(self.err(i + 1, "trailing content after last block"));
            }
        }
        Ok(ModelState {
            dims,
            generator: gen,
            classifier: cls,
            prototypes: PrototypeTable {
                vectors,
                counts,
                amended,
            },
            minority,
            seed,
            step,
        })
    }

    fn block(&mut self, name: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let (ln, head) = self.next_line()?;
        let toks: Vec<&str> = head.split_whitespace().collect();
        let want = [rows.to_string(), cols.to_string()];
        if toks.len() != 4
            || toks[0] != "block"
            || toks[1] != name
            || toks[2] != want[0]
            || toks[3] != want[1]
        {
            return Err(self.err(
                ln,
                format!("expected `block {name} {rows} {cols}`, found `{head}`"),
            ));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (ln, line) = self.next_line()?;
            let before = data.len();
            for t in line.split_whitespace() {
                let v: f64 = t
                    .parse()
                    .map_err(|e| self.err(ln, format!("bad value `{t}`: {e}")))?;
                if !v.is_finite() {
                    return Err(self.err(ln, format!("non-finite value in {name}")));
                }
                data.push(v);
            }
            if data.len() - before != cols {
                return Err(self.err(ln, format!("{name}: expected {cols} values")));
            }
        }
        Ok(Array2::from_shape_vec((rows, cols), data).expect("sized above"))
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Array1<f64>> {
        Ok(self.block(name, 1, len)?.row(0).to_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_params;
    use std::path::PathBuf;

    fn model() -> ModelState {
        let dims = NetworkDims {
            input: 3,
            hidden: 4,
            feature: 2,
            cls_hidden: 3,
            classes: 3,
        };
        let (gen, cls) = init_params(&dims, 12).unwrap();
        let mut m = ModelState::new(dims, gen, cls, vec![2, 0], 12);
        m.prototypes.vectors[[1, 0]] = 1.0 / 3.0;
        m.prototypes.counts = vec![1, 4, 0];
        m.prototypes.amended = true;
        m.step = 17;
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let text = m.to_text();
        let back = ModelState::from_text(&text, &PathBuf::from("x")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn truncated_checkpoint_errors_with_line() {
        let text = model().to_text();
        let cut: String = text.lines().take(5).collect::<Vec<_>>().join("\n");
        match ModelState::from_text(&cut, &PathBuf::from("x")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_block_shape_is_rejected() {
        let text = model()
            .to_text()
            .replace("block gen.b1 1 4", "block gen.b1 1 5");
        assert!(ModelState::from_text(&text, &PathBuf::from("x")).is_err());
    }
}
