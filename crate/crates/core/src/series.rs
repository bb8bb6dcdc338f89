//! Flow frames, frame series, and the `.stf` binary container.
//!
//! Layout (little-endian): magic `STFR`, version `u32`, rows `u32`, cols
//! `u32`, frame count `u32`, interval seconds `u32`, epoch start `i64`,
//! lat_min/lat_max/lon_min/lon_max `f64`, then `T×2×I×J` `f32` values in
//! (t, channel, row, col) order.

use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::tensor::Tensor;

pub const STF_MAGIC: [u8; 4] = *b"STFR";
pub const STF_VERSION: u32 = 1;

pub const INFLOW: usize = 0;
pub const OUTFLOW: usize = 1;

/// One `2×I×J` snapshot: channel 0 inflow, channel 1 outflow.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowFrame {
    t: usize,
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FlowFrame {
    pub fn new(t: usize, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 2 * rows * cols {
            return Err(Error::shape(
                "FlowFrame",
                format!("expected 2×{rows}×{cols} values, got {}", data.len()),
            ));
        }
        Ok(Self { t, rows, cols, data })
    }

    pub fn zeros(t: usize, rows: usize, cols: usize) -> Self {
        Self {
            t,
            rows,
            cols,
            data: vec![0.0; 2 * rows * cols],
        }
    }

    pub fn from_tensor(t: usize, tensor: &Tensor<f32>) -> Result<Self> {
        match tensor.shape() {
            [2, rows, cols] => Self::new(t, *rows, *cols, tensor.data().to_vec()),
            other => Err(Error::shape(
                "FlowFrame::from_tensor",
                format!("expected 2×I×J, got {other:?}"),
            )),
        }
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn channel(&self, channel: usize) -> &[f32] {
        let plane = self.rows * self.cols;
        &self.data[channel * plane..(channel + 1) * plane]
    }

    pub fn inflow(&self) -> &[f32] {
        self.channel(INFLOW)
    }

    pub fn outflow(&self) -> &[f32] {
        self.channel(OUTFLOW)
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * self.rows + row) * self.cols + col]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new([2, self.rows, self.cols], self.data.clone()).expect("frame shape")
    }

    pub fn is_integral(&self) -> bool {
        self.data.iter().all(|v| v.fract() == 0.0)
    }
}

/// Time-ordered frames on one grid, indexed consecutively from 0.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSeries {
    grid: GridSpec,
    frames: Vec<FlowFrame>,
}

impl FrameSeries {
    pub fn new(grid: GridSpec, frames: Vec<FlowFrame>) -> Result<Self> {
        grid.validate()?;
        for (i, f) in frames.iter().enumerate() {
            check_frame(&grid, i, f)?;
        }
        Ok(Self { grid, frames })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn frames(&self) -> &[FlowFrame] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> Option<&FlowFrame> {
        self.frames.get(t)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn push(&mut self, frame: FlowFrame) -> Result<()> {
        check_frame(&self.grid, self.frames.len(), &frame)?;
        self.frames.push(frame);
        Ok(())
    }

    /// The first `len` frames.
    pub fn prefix(&self, len: usize) -> Self {
        Self {
            grid: self.grid.clone(),
            frames: self.frames[..len.min(self.frames.len())].to_vec(),
        }
    }

    pub fn frames_mut(&mut self) -> &mut [FlowFrame] {
        &mut self.frames
    }

    pub fn write_to<W: Write>(&self, sink: W) -> Result<usize> {
        write_series(self, sink)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<usize> {
        let file = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(file);
        let n = write_series(self, &mut w)?;
        w.flush()?;
        Ok(n)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        read_series(io::BufReader::new(file))
    }
}

fn check_frame(grid: &GridSpec, expected_t: usize, f: &FlowFrame) -> Result<()> {
    if f.t != expected_t {
        return Err(Error::contract(
            "FrameSeries",
            format!("frame index {} at position {expected_t}", f.t),
        ));
    }
    if f.rows != grid.rows || f.cols != grid.cols {
        return Err(Error::shape(
            "FrameSeries",
            format!(
                "frame {expected_t} is {}×{} but the grid is {}×{}",
                f.rows, f.cols, grid.rows, grid.cols
            ),
        ));
    }
    Ok(())
}

fn dim_u32(name: &str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Corrupt(format!("{name}={v} does not fit in u32")))
}

/// Serializes a series; returns the number of bytes written.
pub fn write_series<W: Write>(series: &FrameSeries, mut sink: W) -> Result<usize> {
    let g = &series.grid;
    let mut header = Vec::with_capacity(64);
    header.extend_from_slice(&STF_MAGIC);
    header.extend_from_slice(&STF_VERSION.to_le_bytes());
    header.extend_from_slice(&dim_u32("rows", g.rows)?.to_le_bytes());
    header.extend_from_slice(&dim_u32("cols", g.cols)?.to_le_bytes());
    header.extend_from_slice(&dim_u32("frames", series.len())?.to_le_bytes());
    header.extend_from_slice(&g.interval_seconds.to_le_bytes());
    header.extend_from_slice(&g.epoch_start.to_le_bytes());
    for v in [g.lat_min, g.lat_max, g.lon_min, g.lon_max] {
        header.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&header)?;
    let mut written = header.len();
    let mut buf = Vec::with_capacity(2 * g.cells() * 4);
    for f in &series.frames {
        buf.clear();
        for v in &f.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf)?;
        written += buf.len();
    }
    Ok(written)
}

pub(crate) fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], context: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated {
            context: context.to_string(),
        },
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, ctx: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, ctx)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R, ctx: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b, ctx)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_series<R: Read>(mut source: R) -> Result<FrameSeries> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut source, &mut magic, "magic")?;
    if magic != STF_MAGIC {
        return Err(Error::BadMagic {
            expected: STF_MAGIC,
            found: magic,
        });
    }
    let version = read_u32(&mut source, "version")?;
    if version != STF_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: STF_VERSION,
        });
    }
    let rows = read_u32(&mut source, "rows")? as usize;
    let cols = read_u32(&mut source, "cols")? as usize;
    let count = read_u32(&mut source, "frame count")? as usize;
    let interval_seconds = read_u32(&mut source, "interval_seconds")?;
    let mut b8 = [0u8; 8];
    read_exact_or(&mut source, &mut b8, "epoch_start")?;
    let epoch_start = i64::from_le_bytes(b8);
    let lat_min = read_f64(&mut source, "lat_min")?;
    let lat_max = read_f64(&mut source, "lat_max")?;
    let lon_min = read_f64(&mut source, "lon_min")?;
    let lon_max = read_f64(&mut source, "lon_max")?;
    let grid = GridSpec {
        rows,
        cols,
        lat_min,
        lat_max,
        lon_min,
        lon_max,
        interval_seconds,
        epoch_start,
    };
    grid.validate()
        .map_err(|e| Error::Corrupt(format!("invalid grid header: {e}")))?;

    let per_frame = 2 * rows * cols;
    let mut buf = vec![0u8; per_frame * 4];
    let mut frames = Vec::with_capacity(count);
    for t in 0..count {
        read_exact_or(&mut source, &mut buf, &format!("frame {t} of {count}"))?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        frames.push(FlowFrame::new(t, rows, cols, data)?);
    }
    let mut probe = [0u8; 1];
    if source.read(&mut probe)? != 0 {
        return Err(Error::Corrupt("trailing bytes after last frame".into()));
    }
    FrameSeries::new(grid, frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FrameSeries {
        let grid = GridSpec {
            rows: 2,
            cols: 3,
            lat_min: 39.8,
            lat_max: 40.1,
            lon_min: 116.2,
            lon_max: 116.6,
            interval_seconds: 1800,
            epoch_start: 1_704_067_200,
        };
        let frames = (0..4)
            .map(|t| FlowFrame::new(t, 2, 3, (0..12).map(|i| (t * 12 + i) as f32 * 0.37).collect()).unwrap())
            .collect();
        FrameSeries::new(grid, frames).unwrap()
    }

    #[test]
    fn roundtrip_is_identity() {
        let s = sample();
        let mut bytes = Vec::new();
        let n = write_series(&s, &mut bytes).unwrap();
        assert_eq!(n, bytes.len());
        assert_eq!(n, 64 + 4 * 12 * 4);
        assert_eq!(read_series(bytes.as_slice()).unwrap(), s);
    }

    #[test]
    fn bad_magic_version_truncation() {
        let mut bytes = Vec::new();
        write_series(&sample(), &mut bytes).unwrap();

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_series(bad.as_slice()), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            read_series(bad.as_slice()),
            Err(Error::UnsupportedVersion { found: 7, .. })
        ));

        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(read_series(cut), Err(Error::Truncated { .. })));
        assert!(matches!(read_series(&bytes[..10]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn series_rejects_gaps_and_wrong_dims() {
        let s = sample();
        let mut frames = s.frames().to_vec();
        frames.remove(1);
        assert!(FrameSeries::new(s.grid().clone(), frames).is_err());
        let mut s2 = s.clone();
        assert!(s2.push(FlowFrame::zeros(4, 3, 3)).is_err());
        assert!(s2.push(FlowFrame::zeros(4, 2, 3)).is_ok());
    }
}
