//! Multi-environment datasets and their CSV form.
//!
//! The CSV layout is one row per observation with header
//! `env,split,x1,...,xd,y`, where `split` is `train` or `test`. Rows of one
//! environment are contiguous and keep their within-environment order.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Observations from one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvBlock {
    pub env_id: String,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl EnvBlock {
    pub fn new(env_id: impl Into<String>, x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let block = EnvBlock {
            env_id: env_id.into(),
            x,
            y,
        };
        if block.x.nrows() != block.y.len() {
            return Err(Error::Dimension(format!(
                "environment {}: {} predictor rows but {} responses",
                block.env_id,
                block.x.nrows(),
                block.y.len()
            )));
        }
        if block.x.nrows() == 0 {
            return Err(Error::Config(format!("environment {} is empty", block.env_id)));
        }
        Ok(block)
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

/// Training environments plus test environments. Test responses are only
/// used for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBundle {
    pub train: Vec<EnvBlock>,
    pub test: Vec<EnvBlock>,
}

/// Stacked training data.
#[derive(Debug, Clone)]
pub struct Pooled {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Index into `DataBundle::train` for every row.
    pub row_env: Vec<usize>,
}

impl DataBundle {
    pub fn new(train: Vec<EnvBlock>, test: Vec<EnvBlock>) -> Result<Self> {
        let bundle = DataBundle { train, test };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Config("no training environments".into()));
        }
        let d = self.d();
        let mut seen = HashSet::new();
        for b in self.train.iter().chain(&self.test) {
            if b.x.ncols() != d {
                return Err(Error::Dimension(format!(
                    "environment {} has {} predictors, expected {d}",
                    b.env_id,
                    b.x.ncols()
                )));
            }
            if b.is_empty() || b.x.nrows() != b.y.len() {
                return Err(Error::Dimension(format!(
                    "environment {} has inconsistent row counts",
                    b.env_id
                )));
            }
            if !seen.insert(b.env_id.as_str()) {
                return Err(Error::Config(format!("duplicate environment id {}", b.env_id)));
            }
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.train.first().map_or(0, |b| b.x.ncols())
    }

    pub fn n_train(&self) -> usize {
        self.train.iter().map(EnvBlock::len).sum()
    }

    pub fn pooled_train(&self) -> Pooled {
        let n = self.n_train();
        let d = self.d();
        let mut x = DMatrix::zeros(n, d);
        let mut y = DVector::zeros(n);
        let mut row_env = Vec::with_capacity(n);
        let mut row = 0;
        for (e, b) in self.train.iter().enumerate() {
            x.rows_mut(row, b.len()).copy_from(&b.x);
            y.rows_mut(row, b.len()).copy_from(&b.y);
            row_env.extend(std::iter::repeat_n(e, b.len()));
            row += b.len();
        }
        Pooled { x, y, row_env }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let d = self.d();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["env".to_string(), "split".to_string()];
        header.extend((1..=d).map(|j| format!("x{j}")));
        header.push("y".into());
        w.write_record(&header).map_err(|e| Error::csv("<dataset>", e))?;
        for (split, blocks) in [("train", &self.train), ("test", &self.test)] {
            for b in blocks {
                for i in 0..b.len() {
                    let mut rec = vec![b.env_id.clone(), split.to_string()];
                    rec.extend((0..d).map(|j| b.x[(i, j)].to_string()));
                    rec.push(b.y[i].to_string());
                    w.write_record(&rec).map_err(|e| Error::csv("<dataset>", e))?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<dataset>", e))?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Reads the CSV layout above. A test block may omit responses by
    /// leaving the `y` column empty; missing responses read as NaN.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers().map_err(|e| Error::csv("<dataset>", e))?.clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols.len() < 4 || cols[0] != "env" || cols[1] != "split" || cols[cols.len() - 1] != "y"
        {
            return Err(Error::Parse("expected header env,split,x1,...,xd,y".into()));
        }
        let d = cols.len() - 3;

        struct Acc {
            id: String,
            test: bool,
            rows: Vec<f64>,
            y: Vec<f64>,
        }
        let mut blocks: Vec<Acc> = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv("<dataset>", e))?;
            let env = rec.get(0).unwrap_or_default().to_string();
            let test = match rec.get(1) {
                Some("train") => false,
                Some("test") => true,
                other => {
                    return Err(Error::Parse(format!(
                        "row {}: split must be train or test, got {other:?}",
                        line + 2
                    )))
                }
            };
            let parse = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("row {}: bad number {s:?}", line + 2)))
            };
            let mut xs = Vec::with_capacity(d);
            for j in 0..d {
                xs.push(parse(rec.get(2 + j).unwrap_or_default())?);
            }
            let ycell = rec.get(2 + d).unwrap_or_default();
            let y = if ycell.trim().is_empty() && test {
                f64::NAN
            } else {
                parse(ycell)?
            };
            match blocks.last_mut() {
                Some(b) if b.id == env && b.test == test => {
                    b.rows.extend(xs);
                    b.y.push(y);
                }
                _ => {
                    if blocks.iter().any(|b| b.id == env) {
                        return Err(Error::Parse(format!(
                            "rows of environment {env} are not contiguous"
                        )));
                    }
                    blocks.push(Acc {
                        id: env,
                        test,
                        rows: xs,
                        y: vec![y],
                    });
                }
            }
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for b in blocks {
            let n = b.y.len();
            let block = EnvBlock::new(
                b.id,
                DMatrix::from_row_slice(n, d, &b.rows),
                DVector::from_vec(b.y),
            )?;
            if b.test {
                test.push(block);
            } else {
                train.push(block);
            }
        }
        DataBundle::new(train, test)
    }

    pub fn read_csv_file(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}
