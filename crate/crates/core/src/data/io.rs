use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::SceneSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CORPUS_MAGIC: &[u8; 4] = b"LBDS";

pub fn write_corpus<W: Write>(out: &mut W, samples: &[SceneSample]) -> Result<()> {
    out.write_all(CORPUS_MAGIC)?;
    out.write_all(&u32::try_from(samples.len()).map_err(|_| too_big("sample count"))?.to_le_bytes())?;
    for s in samples {
        let (h, w) = s.extent();
        out.write_all(&u32::try_from(h).map_err(|_| too_big("height"))?.to_le_bytes())?;
        out.write_all(&u32::try_from(w).map_err(|_| too_big("width"))?.to_le_bytes())?;
        let mut buf = Vec::with_capacity(16 * h * w + h * w / 8 + 1);
        for v in s.image.data().iter().chain(s.depth.data()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut bits = vec![0u8; (h * w).div_ceil(8)];
        for (i, _) in s.mask.iter().enumerate().filter(|(_, m)| **m) {
            bits[i / 8] |= 1 << (i % 8);
        }
        buf.extend_from_slice(&bits);
        out.write_all(&buf)?;
    }
    Ok(())
}

fn too_big(what: &str) -> Error {
    Error::Format(format!("{what} does not fit in u32"))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated corpus while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f32>> {
    let mut raw = vec![0u8; n * 4];
    read_exact(r, &mut raw, what)?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_corpus<R: Read>(input: &mut R) -> Result<Vec<SceneSample>> {
    let mut magic = [0u8; 4];
    read_exact(input, &mut magic, "magic")?;
    if &magic != CORPUS_MAGIC {
        return Err(Error::Format(format!("bad corpus magic {magic:?}")));
    }
    let count = read_u32(input, "sample count")? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let h = read_u32(input, "height")? as usize;
        let w = read_u32(input, "width")? as usize;
        if h == 0 || w == 0 {
            return Err(Error::Format(format!("sample {i} has empty extent {h}x{w}")));
        }
        let image = read_f32s(input, 3 * h * w, "image payload")?;
        let depth = read_f32s(input, h * w, "depth payload")?;
        let mut bits = vec![0u8; (h * w).div_ceil(8)];
        read_exact(input, &mut bits, "mask")?;
        let mask = (0..h * w).map(|j| bits[j / 8] >> (j % 8) & 1 == 1).collect();
        let sample = SceneSample::new(Tensor::new(vec![3, h, w], image)?, Tensor::new(vec![1, h, w], depth)?, mask)
            .map_err(|e| Error::Format(format!("sample {i}: {e}")))?;
        samples.push(sample);
    }
    Ok(samples)
}

pub fn write_corpus_file(path: &Path, samples: &[SceneSample]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_corpus(&mut out, samples)?;
    out.flush()?;
    Ok(())
}

pub fn read_corpus_file(path: &Path) -> Result<Vec<SceneSample>> {
    read_corpus(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_scene;
    use crate::model::DepthRange;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<_> = (0..3)
            .map(|_| generate_scene(&mut rng, 8, 12, DepthRange::default()))
            .collect();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &samples).unwrap();
        assert_eq!(buf.len(), 8 + 3 * (8 + 16 * 96 + 12));
        let back = read_corpus(&mut buf.as_slice()).unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn empty_corpus() {
        let mut buf = Vec::new();
        write_corpus(&mut buf, &[]).unwrap();
        assert_eq!(buf, b"LBDS\0\0\0\0");
        assert!(read_corpus(&mut buf.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn mask_bits_are_lsb_first() {
        let mut mask = vec![false; 9];
        mask[0] = true;
        mask[8] = true;
        let s = SceneSample::new(Tensor::zeros(&[3, 3, 3]), Tensor::zeros(&[1, 3, 3]), mask).unwrap();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &[s]).unwrap();
        assert_eq!(&buf[buf.len() - 2..], &[0b0000_0001, 0b0000_0001]);
    }

    #[test]
    fn corrupt_input_is_a_format_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut buf = Vec::new();
        write_corpus(&mut buf, &[generate_scene(&mut rng, 4, 4, DepthRange::default())]).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_corpus(&mut bad.as_slice()), Err(Error::Format(_))));
        let cut = &buf[..buf.len() - 1];
        assert!(matches!(read_corpus(&mut &cut[..]), Err(Error::Format(_))));
    }
}
