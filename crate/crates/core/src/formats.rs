//! Little-endian binary file formats.
//!
//! * `TFG1` spectrogram: magic, `u32` frames, `u32` bins, `f32` values row-major.
//! * `TVCG` field: magic, `u32` version (1), `u32` frames, bins, K, then per bin
//!   per component ten `f32`: logit, μ[3], d[3], l21, l31, l32.
//! * `TVDS` dataset: magic, `u32` version (1), `u32` record count, then per
//!   record a `u32` condition id followed by a TFG1 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::spectral::MelSpectrogram;
use crate::synth::{ConditionedDataset, Record};
use crate::tvcgmm::{TvcComponent, TvcGmmField, PARAMS_PER_COMPONENT};

pub const TFG1_MAGIC: &[u8; 4] = b"TFG1";
pub const TVCG_MAGIC: &[u8; 4] = b"TVCG";
pub const TVDS_MAGIC: &[u8; 4] = b"TVDS";
pub const TVCG_VERSION: u32 = 1;
pub const TVDS_VERSION: u32 = 1;

/// Refuse absurd headers before allocating.
const MAX_CELLS: u64 = 1 << 28;

fn read_err(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format("unexpected end of file")
    } else {
        Error::format(format!("read failed: {e}"))
    }
}

fn write_err(e: std::io::Error) -> Error {
    Error::format(format!("write failed: {e}"))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(read_err)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(read_err)?;
    Ok(f32::from_le_bytes(b))
}

fn expect_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(read_err)?;
    if &b != magic {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&b),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

fn dim(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::format(format!("dimension {v} exceeds u32")))
}

pub fn write_tfg1(w: &mut impl Write, spec: &MelSpectrogram) -> Result<()> {
    w.write_all(TFG1_MAGIC).map_err(write_err)?;
    w.write_all(&dim(spec.frames())?.to_le_bytes()).map_err(write_err)?;
    w.write_all(&dim(spec.bins())?.to_le_bytes()).map_err(write_err)?;
    for &v in spec.values().as_slice() {
        w.write_all(&(v as f32).to_le_bytes()).map_err(write_err)?;
    }
    Ok(())
}

pub fn read_tfg1(r: &mut impl Read) -> Result<MelSpectrogram> {
    expect_magic(r, TFG1_MAGIC)?;
    let frames = read_u32(r)? as usize;
    let bins = read_u32(r)? as usize;
    if (frames as u64) * (bins as u64) > MAX_CELLS {
        return Err(Error::format(format!("implausible TFG1 size {frames}x{bins}")));
    }
    let mut data = Vec::with_capacity(frames * bins);
    for _ in 0..frames * bins {
        data.push(read_f32(r)? as f64);
    }
    MelSpectrogram::new(Grid::from_vec(frames, bins, data)?)
        .map_err(|_| Error::format("TFG1 contains non-finite values"))
}

pub fn write_tvcg(w: &mut impl Write, field: &TvcGmmField) -> Result<()> {
    w.write_all(TVCG_MAGIC).map_err(write_err)?;
    for v in [
        TVCG_VERSION,
        dim(field.frames())?,
        dim(field.bins())?,
        dim(field.k())?,
    ] {
        w.write_all(&v.to_le_bytes()).map_err(write_err)?;
    }
    for c in field.components() {
        for p in c.to_params() {
            w.write_all(&(p as f32).to_le_bytes()).map_err(write_err)?;
        }
    }
    Ok(())
}

pub fn read_tvcg(r: &mut impl Read) -> Result<TvcGmmField> {
    expect_magic(r, TVCG_MAGIC)?;
    let version = read_u32(r)?;
    if version != TVCG_VERSION {
        return Err(Error::format(format!("unsupported TVCG version {version}")));
    }
    let frames = read_u32(r)? as usize;
    let bins = read_u32(r)? as usize;
    let k = read_u32(r)? as usize;
    if (frames as u64) * (bins as u64) * (k as u64) > MAX_CELLS {
        return Err(Error::format("implausible TVCG size"));
    }
    let mut comps = Vec::with_capacity(frames * bins * k);
    let mut params = [0.0; PARAMS_PER_COMPONENT];
    for _ in 0..frames * bins * k {
        for p in params.iter_mut() {
            *p = read_f32(r)? as f64;
        }
        comps.push(TvcComponent::from_params(&params));
    }
    TvcGmmField::new(frames, bins, k, comps).map_err(|e| Error::format(e.to_string()))
}

pub fn write_tvds(w: &mut impl Write, data: &ConditionedDataset) -> Result<()> {
    w.write_all(TVDS_MAGIC).map_err(write_err)?;
    w.write_all(&TVDS_VERSION.to_le_bytes()).map_err(write_err)?;
    w.write_all(&dim(data.records.len())?.to_le_bytes())
        .map_err(write_err)?;
    for rec in &data.records {
        w.write_all(&rec.condition.to_le_bytes()).map_err(write_err)?;
        write_tfg1(w, &rec.spec)?;
    }
    Ok(())
}

pub fn read_tvds(r: &mut impl Read) -> Result<ConditionedDataset> {
    expect_magic(r, TVDS_MAGIC)?;
    let version = read_u32(r)?;
    if version != TVDS_VERSION {
        return Err(Error::format(format!("unsupported TVDS version {version}")));
    }
    let n = read_u32(r)? as usize;
    let mut records = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let condition = read_u32(r)?;
        records.push(Record {
            condition,
            spec: read_tfg1(r)?,
        });
    }
    Ok(ConditionedDataset {
        records,
        spec: None,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_spectrogram(path: impl AsRef<Path>, spec: &MelSpectrogram) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write_tfg1(&mut w, spec)?;
    finish(w, path)
}

pub fn load_spectrogram(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    read_tfg1(&mut open(path.as_ref())?)
}

pub fn save_field(path: impl AsRef<Path>, field: &TvcGmmField) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write_tvcg(&mut w, field)?;
    finish(w, path)
}

pub fn load_field(path: impl AsRef<Path>) -> Result<TvcGmmField> {
    read_tvcg(&mut open(path.as_ref())?)
}

pub fn save_dataset(path: impl AsRef<Path>, data: &ConditionedDataset) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write_tvds(&mut w, data)?;
    finish(w, path)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<ConditionedDataset> {
    read_tvds(&mut open(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};
    use crate::tvcgmm::Chol3;
    use proptest::prelude::*;

    #[test]
    fn tfg1_layout_is_exact() {
        let spec = MelSpectrogram::new(Grid::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, -0.5]).unwrap())
            .unwrap();
        let mut buf = Vec::new();
        write_tfg1(&mut buf, &spec).unwrap();
        assert_eq!(&buf[..4], b"TFG1");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &3u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1.0f32.to_le_bytes());
        assert_eq!(&buf[32..36], &(-0.5f32).to_le_bytes());
        assert_eq!(buf.len(), 12 + 6 * 4);
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        let mut buf = Vec::new();
        write_tfg1(&mut buf, &MelSpectrogram::constant(2, 2, 0.0)).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_tfg1(&mut bad.as_slice()), Err(Error::Format(_))));
        assert!(matches!(
            read_tfg1(&mut &buf[..buf.len() - 1]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn tvcg_round_trip() {
        let field = TvcGmmField::from_fn(3, 2, 2, |t, f, k| {
            TvcComponent::new(
                k as f64 * 0.5,
                [t as f64, f as f64, 0.25],
                Chol3 {
                    diag_pre: [0.5, -1.0, 2.0],
                    off: [0.125, -0.25, 0.0],
                },
            )
        });
        let mut buf = Vec::new();
        write_tvcg(&mut buf, &field).unwrap();
        assert_eq!(buf.len(), 20 + 3 * 2 * 2 * 10 * 4);
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        // Values are exactly representable in f32.
        assert_eq!(read_tvcg(&mut buf.as_slice()).unwrap(), field);
    }

    #[test]
    fn tvds_round_trip() {
        let data = generate(&SynthSpec::default(), 2).unwrap();
        let mut buf = Vec::new();
        write_tvds(&mut buf, &data).unwrap();
        let back = read_tvds(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 8);
        for (a, b) in data.records.iter().zip(&back.records) {
            assert_eq!(a.condition, b.condition);
            assert!(a.spec.values().max_abs_diff(b.spec.values()) < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn tfg1_round_trips_f32_values(
            frames in 1usize..6,
            bins in 1usize..6,
            seed in any::<u64>(),
        ) {
            let spec = MelSpectrogram::from_fn(frames, bins, |t, f| {
                let x = crate::rng::splitmix64(seed ^ (t * 31 + f) as u64);
                (x as f32 / u64::MAX as f32 * 20.0 - 10.0) as f64
            });
            let mut buf = Vec::new();
            write_tfg1(&mut buf, &spec).unwrap();
            prop_assert_eq!(read_tfg1(&mut buf.as_slice()).unwrap(), spec);
        }
    }
}
