//! File formats for stage hand-offs: image stacks, rotation lists, candidate
//! table caches, quadruple dumps, rank-1 triple dumps, and row-field dumps.
//!
//! All binary formats are little-endian with a 6-byte ASCII magic. The text
//! rotation format is "N" on the first line, then one rotation per line as 9
//! row-major floats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Matrix3;

use crate::commonlines::{QuadrupleSource, RelRotQuadruple};
use crate::geom::Rotation;
use crate::grid::{CandidateTable, PairEntry, SelfEntry};
use crate::pairs::PairVec;
use crate::rowsync::Rank1Triple;
use crate::signsync::RowField;
use crate::simulate::Image;
use crate::{Error, Result};

const MAGIC_IMAGES: &[u8; 6] = b"D2IMGS";
const MAGIC_TABLE: &[u8; 6] = b"D2TBL1";
const MAGIC_QUADS: &[u8; 6] = b"D2QUAD";
const MAGIC_TRIPLES: &[u8; 6] = b"D2TRIP";
const MAGIC_ROWS: &[u8; 6] = b"D2ROWS";

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u16(w: &mut impl Write, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn check_magic(r: &mut impl Read, expect: &[u8; 6], what: &str) -> Result<()> {
    let mut m = [0u8; 6];
    r.read_exact(&mut m)?;
    if &m != expect {
        return Err(Error::Format(format!(
            "{what}: bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(expect)
        )));
    }
    Ok(())
}

fn write_matrix3(w: &mut impl Write, m: &Matrix3<f64>) -> Result<()> {
    for r in 0..3 {
        for c in 0..3 {
            write_f64(w, m[(r, c)])?;
        }
    }
    Ok(())
}

fn read_matrix3(r: &mut impl Read) -> Result<Matrix3<f64>> {
    let mut m = Matrix3::zeros();
    for row in 0..3 {
        for col in 0..3 {
            m[(row, col)] = read_f64(r)?;
        }
    }
    Ok(m)
}

// ---- image stacks ---------------------------------------------------------

pub fn write_image_stack(path: &Path, images: &[Image]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::InvalidParam(
            "cannot write an empty image stack".into(),
        ));
    }
    let side = images[0].side;
    let pixel_size = images[0].pixel_size;
    if images
        .iter()
        .any(|i| i.side != side || i.pixel_size != pixel_size)
    {
        return Err(Error::SizeMismatch(
            "images in a stack must share geometry".into(),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC_IMAGES)?;
    write_u32(&mut w, images.len() as u32)?;
    write_u32(&mut w, side as u32)?;
    write_f64(&mut w, pixel_size)?;
    for img in images {
        for p in &img.pixels {
            write_f64(&mut w, *p)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_image_stack(path: &Path) -> Result<Vec<Image>> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, MAGIC_IMAGES, "image stack")?;
    let count = read_u32(&mut r)? as usize;
    let side = read_u32(&mut r)? as usize;
    let pixel_size = read_f64(&mut r)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pixels = vec![0.0; side * side];
        for p in pixels.iter_mut() {
            *p = read_f64(&mut r)?;
        }
        out.push(Image {
            side,
            pixel_size,
            pixels,
        });
    }
    Ok(out)
}

// ---- rotation lists (text) ------------------------------------------------

pub fn write_rotations(path: &Path, rotations: &[Rotation]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", rotations.len())?;
    for r in rotations {
        let m = r.matrix();
        let vals: Vec<String> = (0..3)
            .flat_map(|i| (0..3).map(move |j| format!("{:.17e}", m[(i, j)])))
            .collect();
        writeln!(w, "{}", vals.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rotations(path: &Path) -> Result<Vec<Rotation>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let n: usize = lines
        .next()
        .ok_or_else(|| Error::Format("rotation file is empty".into()))?
        .trim()
        .parse()
        .map_err(|e| Error::Format(format!("bad rotation count: {e}")))?;
    let mut out = Vec::with_capacity(n);
    for (ln, line) in lines.enumerate() {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|e| Error::Format(format!("line {}: {e}", ln + 2)))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 9 {
            return Err(Error::Format(format!(
                "line {}: expected 9 floats, got {}",
                ln + 2,
                vals.len()
            )));
        }
        let m = Matrix3::from_row_slice(&vals);
        out.push(Rotation::try_new(m).map_err(|e| Error::Format(format!("line {}: {e}", ln + 2)))?);
    }
    if out.len() != n {
        return Err(Error::Format(format!(
            "header says {n} rotations, file has {}",
            out.len()
        )));
    }
    Ok(out)
}

// ---- candidate table cache --------------------------------------------------

pub fn write_table_cache(path: &Path, table: &CandidateTable) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC_TABLE)?;
    write_u32(&mut w, table.k as u32)?;
    write_u32(&mut w, table.l as u32)?;
    write_u32(&mut w, table.l_rays as u32)?;
    write_f64(&mut w, table.eps_align)?;
    write_u64(&mut w, table.pairs.len() as u64)?;
    for e in &table.pairs {
        write_u32(&mut w, e.l)?;
        write_u32(&mut w, e.r)?;
        for m in 0..4 {
            write_u16(&mut w, e.rays[m][0])?;
            write_u16(&mut w, e.rays[m][1])?;
        }
    }
    for s in &table.selfs {
        for m in 0..3 {
            write_u16(&mut w, s.rays[m][0])?;
            write_u16(&mut w, s.rays[m][1])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a cached table; fails unless the cached parameters match the
/// requested ones exactly. Rotations are regenerated from (k, l), which is
/// deterministic and cheaper than storing them.
pub fn read_table_cache(
    path: &Path,
    k: usize,
    l: usize,
    l_rays: usize,
    eps_align: f64,
) -> Result<CandidateTable> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, MAGIC_TABLE, "table cache")?;
    let fk = read_u32(&mut r)? as usize;
    let fl = read_u32(&mut r)? as usize;
    let frays = read_u32(&mut r)? as usize;
    let feps = read_f64(&mut r)?;
    if (fk, fl, frays) != (k, l, l_rays) || feps != eps_align {
        return Err(Error::Format(format!(
            "table cache key mismatch: cached (k={fk}, l={fl}, l_rays={frays}, eps={feps}), requested (k={k}, l={l}, l_rays={l_rays}, eps={eps_align})"
        )));
    }
    let n_pairs = read_u64(&mut r)? as usize;
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let lidx = read_u32(&mut r)?;
        let ridx = read_u32(&mut r)?;
        let mut rays = [[0u16; 2]; 4];
        for m in 0..4 {
            rays[m] = [read_u16(&mut r)?, read_u16(&mut r)?];
        }
        pairs.push(PairEntry {
            l: lidx,
            r: ridx,
            rays,
        });
    }
    let sphere = crate::grid::sphere_grid(k)?;
    let mut rotations = Vec::with_capacity(k * l);
    for z in &sphere.points {
        rotations.extend(crate::grid::inplane_rotations(z, l));
    }
    let mut selfs = Vec::with_capacity(rotations.len());
    for _ in 0..rotations.len() {
        let mut rays = [[0u16; 2]; 3];
        for m in 0..3 {
            rays[m] = [read_u16(&mut r)?, read_u16(&mut r)?];
        }
        selfs.push(SelfEntry { rays });
    }
    Ok(CandidateTable {
        k,
        l,
        l_rays,
        eps_align,
        rotations,
        pairs,
        selfs,
    })
}

// ---- quadruple dumps --------------------------------------------------------

pub fn write_quadruples(path: &Path, quads: &PairVec<RelRotQuadruple>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC_QUADS)?;
    write_u32(&mut w, quads.n() as u32)?;
    for (_, _, q) in quads.iter_pairs() {
        for m in 0..4 {
            write_matrix3(&mut w, q.mats[m].matrix())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_quadruples(path: &Path) -> Result<PairVec<RelRotQuadruple>> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, MAGIC_QUADS, "quadruple dump")?;
    let n = read_u32(&mut r)? as usize;
    let count = crate::pairs::pair_count(n);
    let mut items = Vec::with_capacity(count);
    for _ in 0..count {
        let mut mats = [Rotation::identity(); 4];
        for m in 0..4 {
            mats[m] = Rotation::from_matrix_unchecked(read_matrix3(&mut r)?);
        }
        items.push(RelRotQuadruple {
            mats,
            source: QuadrupleSource::Synthetic,
        });
    }
    PairVec::from_vec(n, items)
}

// ---- rank-1 triple dumps ----------------------------------------------------

pub fn write_triples(
    path: &Path,
    triples: &PairVec<Rank1Triple>,
    colors: &[[usize; 3]],
) -> Result<()> {
    if colors.len() != triples.len() {
        return Err(Error::SizeMismatch(
            "one color triple per pair required".into(),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC_TRIPLES)?;
    write_u32(&mut w, triples.n() as u32)?;
    for ((_, _, t), cols) in triples.iter_pairs().zip(colors) {
        for m in 0..3 {
            write_matrix3(&mut w, &t.mats[m])?;
        }
        for m in 0..3 {
            write_u32(&mut w, cols[m] as u32)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_triples(path: &Path) -> Result<(PairVec<Rank1Triple>, Vec<[usize; 3]>)> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, MAGIC_TRIPLES, "triple dump")?;
    let n = read_u32(&mut r)? as usize;
    let count = crate::pairs::pair_count(n);
    let mut items = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    for _ in 0..count {
        let mut mats = [Matrix3::zeros(); 3];
        for m in 0..3 {
            mats[m] = read_matrix3(&mut r)?;
        }
        let mut cols = [0usize; 3];
        for m in 0..3 {
            cols[m] = read_u32(&mut r)? as usize;
            if cols[m] > 2 {
                return Err(Error::Format(format!(
                    "color index {} out of range",
                    cols[m]
                )));
            }
        }
        items.push(Rank1Triple { mats });
        colors.push(cols);
    }
    Ok((PairVec::from_vec(n, items)?, colors))
}

// ---- row-field dumps --------------------------------------------------------

pub fn write_row_fields(path: &Path, fields: &[RowField; 3]) -> Result<()> {
    let n = fields[0].rows.len();
    if fields.iter().any(|f| f.rows.len() != n) {
        return Err(Error::SizeMismatch(
            "row fields must share image count".into(),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC_ROWS)?;
    write_u32(&mut w, n as u32)?;
    for f in fields {
        for row in &f.rows {
            write_f64(&mut w, row.x)?;
            write_f64(&mut w, row.y)?;
            write_f64(&mut w, row.z)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_row_fields(path: &Path) -> Result<[RowField; 3]> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, MAGIC_ROWS, "row-field dump")?;
    let n = read_u32(&mut r)? as usize;
    let mut fields = Vec::with_capacity(3);
    for _ in 0..3 {
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let x = read_f64(&mut r)?;
            let y = read_f64(&mut r)?;
            let z = read_f64(&mut r)?;
            rows.push(nalgebra::Vector3::new(x, y, z));
        }
        fields.push(RowField { rows });
    }
    fields
        .try_into()
        .map_err(|_| Error::Format("row-field dump truncated".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{project, random_rotations, synth_quadruples, CorruptionSpec, Phantom};
    use tempfile::tempdir;

    #[test]
    fn image_stack_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("stack.d2imgs");
        let ph = Phantom::default_test_phantom();
        let rots = random_rotations(3, 1);
        let images: Vec<Image> = rots.iter().map(|r| project(&ph, r, 16, 1.5)).collect();
        write_image_stack(&path, &images).unwrap();
        let back = read_image_stack(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in images.iter().zip(&back) {
            assert_eq!(a.side, b.side);
            assert_eq!(a.pixel_size, b.pixel_size);
            assert_eq!(a.pixels, b.pixels);
        }
    }

    #[test]
    fn rotations_round_trip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rots.txt");
        let rots = random_rotations(7, 2);
        write_rotations(&path, &rots).unwrap();
        let back = read_rotations(&path).unwrap();
        assert_eq!(back.len(), 7);
        for (a, b) in rots.iter().zip(&back) {
            assert_eq!(a.matrix(), b.matrix());
        }
    }

    #[test]
    fn table_cache_round_trip_and_key_check() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("table.d2tbl");
        let table = crate::grid::build_candidate_tables(10, 2, 24, 0.017).unwrap();
        write_table_cache(&path, &table).unwrap();
        let back = read_table_cache(&path, 10, 2, 24, 0.017).unwrap();
        assert_eq!(back.pairs, table.pairs);
        assert_eq!(back.selfs, table.selfs);
        for (a, b) in back.rotations.iter().zip(&table.rotations) {
            assert_eq!(a.matrix(), b.matrix());
        }
        assert!(read_table_cache(&path, 10, 2, 36, 0.017).is_err());
    }

    #[test]
    fn quadruple_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("quads.d2quad");
        let rots = random_rotations(5, 3);
        let synth = synth_quadruples(&rots, &CorruptionSpec::clean(), 0).unwrap();
        write_quadruples(&path, &synth.quadruples).unwrap();
        let back = read_quadruples(&path).unwrap();
        assert_eq!(back.n(), 5);
        for ((_, _, a), (_, _, b)) in back.iter_pairs().zip(synth.quadruples.iter_pairs()) {
            for m in 0..4 {
                assert_eq!(a.mats[m].matrix(), b.mats[m].matrix());
            }
        }
    }
}
