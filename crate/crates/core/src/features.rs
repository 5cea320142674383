//! Collected feature sequences and their on-disk forms.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::BBox;

/// One collected vector with its probability and decoded box (slide pixels).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub prob: f32,
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
    pub features: Vec<f32>,
}

impl FeatureRow {
    pub fn bbox(&self) -> Result<BBox> {
        BBox::new(self.x as f64, self.y as f64, self.w as f64, self.h as f64)
    }
}

/// The ranked vectors representing one slide.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub slide_id: String,
    /// `Some(true)` for a positive slide; `None` when unknown.
    pub label: Option<bool>,
    pub dim: usize,
    pub rows: Vec<FeatureRow>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    slide_id: String,
    n: usize,
    dim: usize,
    label: Option<u8>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `u64` little-endian header length, JSON header, then per row
    /// `prob, x, y, w, h` and `dim` features, all `f32` little-endian.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let header = Header {
            slide_id: self.slide_id.clone(),
            n: self.rows.len(),
            dim: self.dim,
            label: self.label.map(u8::from),
        };
        let bytes = serde_json::to_vec(&header)?;
        out.write_all(&(bytes.len() as u64).to_le_bytes())?;
        out.write_all(&bytes)?;
        for r in &self.rows {
            if r.features.len() != self.dim {
                return Err(invalid("FeatureSequence::write_to", format!("row has {} features, expected {}", r.features.len(), self.dim)));
            }
            for v in [r.prob, r.x, r.y, r.w, r.h].iter().chain(&r.features) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 20 {
            return Err(invalid("FeatureSequence::read_from", format!("implausible header length {len}")));
        }
        let mut hb = vec![0u8; len];
        input.read_exact(&mut hb)?;
        let header: Header = serde_json::from_slice(&hb)?;
        let mut buf = vec![0u8; 4 * (5 + header.dim)];
        let mut rows = Vec::with_capacity(header.n);
        for _ in 0..header.n {
            input.read_exact(&mut buf)?;
            let vals: Vec<f32> = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            rows.push(FeatureRow { prob: vals[0], x: vals[1], y: vals[2], w: vals[3], h: vals[4], features: vals[5..].to_vec() });
        }
        Ok(Self { slide_id: header.slide_id, label: header.label.map(|l| l != 0), dim: header.dim, rows })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn csv_header(dim: usize) -> String {
        let mut s = String::from("slide_id,rank,prob,x,y,w,h");
        for i in 0..dim {
            s.push_str(&format!(",f{i}"));
        }
        s
    }

    /// One CSV line per row (no header), rank starting at 0.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for (rank, r) in self.rows.iter().enumerate() {
            s.push_str(&format!("{},{rank},{},{},{},{},{}", self.slide_id, r.prob, r.x, r.y, r.w, r.h));
            for v in &r.features {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}
