//! Binary dataset format.
//!
//! Layout: magic `TAPDS1`, world id, flags, episode count, then the frame
//! geometry, then per episode the frames as little-endian f32, positions as
//! u16 triples, bottleneck indices as u16, and a trailing CRC32 of the
//! episode payload. Frames are generated at f32 precision, so the
//! f64 -> f32 storage narrowing is exact and round-trips bit-identically.

use super::{Dataset, EntityPos, Episode, WorldId};
use crate::autodiff::Tensor;
use crate::{Error, Result};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const DATASET_MAGIC: &[u8; 6] = b"TAPDS1";

const FLAG_POSITIONS: u8 = 0b01;
const FLAG_BOTTLENECKS: u8 = 0b10;

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    w.write_all(DATASET_MAGIC).map_err(io_err)?;
    w.write_all(&[dataset.world.code(), FLAG_POSITIONS | FLAG_BOTTLENECKS])
        .map_err(io_err)?;
    w.write_all(&(dataset.episodes.len() as u32).to_le_bytes()).map_err(io_err)?;
    for v in [dataset.t_len, dataset.height, dataset.width, dataset.channels] {
        w.write_all(&(v as u16).to_le_bytes()).map_err(io_err)?;
    }

    for ep in &dataset.episodes {
        let payload = episode_payload(dataset, ep)?;
        let crc = crc32fast::hash(&payload);
        w.write_all(&payload).map_err(io_err)?;
        w.write_all(&crc.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn episode_payload(dataset: &Dataset, ep: &Episode) -> Result<Vec<u8>> {
    let frame_len = dataset.channels * dataset.height * dataset.width;
    let mut buf = Vec::with_capacity(ep.frames.len() * frame_len * 4);
    if ep.frames.len() != dataset.t_len || ep.positions.len() != dataset.t_len {
        return Err(Error::Data(format!(
            "episode has {} frames / {} position rows, dataset t_len is {}",
            ep.frames.len(),
            ep.positions.len(),
            dataset.t_len
        )));
    }
    for frame in &ep.frames {
        if frame.numel() != frame_len {
            return Err(Error::Data(format!(
                "frame has {} values, expected {}",
                frame.numel(),
                frame_len
            )));
        }
        for &v in frame.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let entity_count = ep.positions.first().map_or(0, |p| p.len());
    buf.extend_from_slice(&(entity_count as u16).to_le_bytes());
    for row in &ep.positions {
        if row.len() != entity_count {
            return Err(Error::Data("inconsistent entity count across frames".into()));
        }
        for e in row {
            buf.extend_from_slice(&e.id.to_le_bytes());
            buf.extend_from_slice(&e.x.to_le_bytes());
            buf.extend_from_slice(&e.y.to_le_bytes());
        }
    }
    buf.extend_from_slice(&(ep.bottleneck_truth.len() as u16).to_le_bytes());
    for &b in &ep.bottleneck_truth {
        buf.extend_from_slice(&(b as u16).to_le_bytes());
    }
    Ok(buf)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let trunc = |what: &str| Error::Truncated {
        path: path.to_path_buf(),
        detail: what.to_string(),
    };

    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|_| trunc("magic"))?;
    if &magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "TAPDS1",
        });
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head).map_err(|_| trunc("header"))?;
    let world = WorldId::from_code(head[0])?;
    let flags = head[1];
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(|_| trunc("episode count"))?;
    let n_episodes = u32::from_le_bytes(buf4) as usize;
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let mut b = [0u8; 2];
        r.read_exact(&mut b).map_err(|_| trunc("geometry"))?;
        *d = u16::from_le_bytes(b) as usize;
    }
    let [t_len, height, width, channels] = dims;
    let frame_len = channels * height * width;

    let mut episodes = Vec::with_capacity(n_episodes);
    for ep_idx in 0..n_episodes {
        let mut payload = vec![0u8; t_len * frame_len * 4];
        r.read_exact(&mut payload).map_err(|_| trunc("frames"))?;

        let mut rest = Vec::new();
        if flags & FLAG_POSITIONS != 0 {
            let mut b = [0u8; 2];
            r.read_exact(&mut b).map_err(|_| trunc("entity count"))?;
            rest.extend_from_slice(&b);
            let entity_count = u16::from_le_bytes(b) as usize;
            let mut pos = vec![0u8; t_len * entity_count * 6];
            r.read_exact(&mut pos).map_err(|_| trunc("positions"))?;
            rest.extend_from_slice(&pos);
        }
        if flags & FLAG_BOTTLENECKS != 0 {
            let mut b = [0u8; 2];
            r.read_exact(&mut b).map_err(|_| trunc("bottleneck count"))?;
            rest.extend_from_slice(&b);
            let n = u16::from_le_bytes(b) as usize;
            let mut idx = vec![0u8; n * 2];
            r.read_exact(&mut idx).map_err(|_| trunc("bottleneck indices"))?;
            rest.extend_from_slice(&idx);
        }
        let mut crc_bytes = [0u8; 4];
        r.read_exact(&mut crc_bytes).map_err(|_| trunc("checksum"))?;
        let expected = u32::from_le_bytes(crc_bytes);

        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&payload);
        hasher.update(&rest);
        if hasher.finalize() != expected {
            return Err(Error::ChecksumMismatch {
                path: path.to_path_buf(),
                episode: ep_idx,
            });
        }

        episodes.push(decode_episode(&payload, &rest, flags, t_len, channels, height, width)?);
    }
    // trailing bytes mean a corrupted or mismatched file
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Data(format!(
            "{}: trailing bytes after {} episodes",
            path.display(),
            n_episodes
        )));
    }
    Ok(Dataset {
        world,
        t_len,
        height,
        width,
        channels,
        episodes,
    })
}

fn decode_episode(
    frames_raw: &[u8],
    rest: &[u8],
    flags: u8,
    t_len: usize,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Episode> {
    let frame_len = channels * height * width;
    let mut frames = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut data = Vec::with_capacity(frame_len);
        for i in 0..frame_len {
            let off = (t * frame_len + i) * 4;
            let v = f32::from_le_bytes(frames_raw[off..off + 4].try_into().expect("sized read"));
            data.push(f64::from(v));
        }
        frames.push(Tensor::from_vec(vec![channels, height, width], data)?);
    }
    let mut cursor = 0usize;
    let mut positions = vec![Vec::new(); t_len];
    if flags & FLAG_POSITIONS != 0 {
        let entity_count = u16::from_le_bytes(rest[cursor..cursor + 2].try_into().expect("sized")) as usize;
        cursor += 2;
        for row in positions.iter_mut() {
            for _ in 0..entity_count {
                let id = u16::from_le_bytes(rest[cursor..cursor + 2].try_into().expect("sized"));
                let x = u16::from_le_bytes(rest[cursor + 2..cursor + 4].try_into().expect("sized"));
                let y = u16::from_le_bytes(rest[cursor + 4..cursor + 6].try_into().expect("sized"));
                cursor += 6;
                row.push(EntityPos { id, x, y });
            }
        }
    }
    let mut bottleneck_truth = Vec::new();
    if flags & FLAG_BOTTLENECKS != 0 {
        let n = u16::from_le_bytes(rest[cursor..cursor + 2].try_into().expect("sized")) as usize;
        cursor += 2;
        for _ in 0..n {
            bottleneck_truth.push(u16::from_le_bytes(rest[cursor..cursor + 2].try_into().expect("sized")) as usize);
            cursor += 2;
        }
    }
    debug_assert_eq!(cursor, rest.len());
    Ok(Episode {
        frames,
        positions,
        bottleneck_truth,
    })
}
