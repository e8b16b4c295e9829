//! On-disk formats: binary PPM/PGM rasters, palette files, token-grid files.
//!
//! Every writer emits a canonical byte layout so write → read → write
//! round-trips are bit-identical.
//!
//! - `RgbGrid`: binary PPM (`P6`, maxval 255).
//! - `MaskGrid`: binary PGM (`P5`, maxval 255), 255 = missing, 0 = valid.
//! - `Palette`: text, `BATPAL 1`, then `k`, then `r g b` integer lines.
//! - `TokenGrid`: text, `BATTOK 1 <h> <w> <k>`, then one line per row.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::maskgen::MaskGrid;
use crate::palette::{Palette, RgbGrid, TokenGrid};

fn ctx(path: &Path, msg: impl Into<String>) -> Error {
    Error::format(path.display().to_string(), msg)
}

// ---------------------------------------------------------------------------
// PNM scanning helpers

/// Reads one whitespace-delimited PNM header token, skipping `#` comments.
fn pnm_token<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(ctx(path, "unexpected end of header"));
    }
    Ok(&bytes[start..*pos])
}

fn pnm_usize(bytes: &[u8], pos: &mut usize, path: &Path, what: &str) -> Result<usize> {
    let tok = pnm_token(bytes, pos, path)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ctx(path, format!("invalid {what}")))
}

fn pnm_raster(
    bytes: &[u8],
    path: &Path,
    magic: &[u8],
    channels: usize,
) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0usize;
    if pnm_token(bytes, &mut pos, path)? != magic {
        return Err(ctx(
            path,
            format!("expected {} magic", String::from_utf8_lossy(magic)),
        ));
    }
    let width = pnm_usize(bytes, &mut pos, path, "width")?;
    let height = pnm_usize(bytes, &mut pos, path, "height")?;
    let maxval = pnm_usize(bytes, &mut pos, path, "maxval")?;
    if maxval != 255 {
        return Err(ctx(path, format!("unsupported maxval {maxval}, expected 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(ctx(path, "missing raster separator"));
    }
    pos += 1;
    let need = height * width * channels;
    let raster = &bytes[pos..];
    if raster.len() != need {
        return Err(ctx(
            path,
            format!("raster has {} bytes, expected {need}", raster.len()),
        ));
    }
    Ok((height, width, raster.to_vec()))
}

// ---------------------------------------------------------------------------
// PPM (RgbGrid)

pub fn write_ppm(path: impl AsRef<Path>, image: &RgbGrid) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    for p in image.pixels() {
        out.extend_from_slice(p);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let (height, width, raster) = pnm_raster(&bytes, path, b"P6", 3)?;
    let pixels = raster.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    RgbGrid::new(height, width, pixels)
}

// ---------------------------------------------------------------------------
// PGM (MaskGrid)

pub fn write_pgm_mask(path: impl AsRef<Path>, mask: &MaskGrid) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.missing().iter().map(|&m| if m { 255u8 } else { 0u8 }));
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pgm_mask(path: impl AsRef<Path>) -> Result<MaskGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let (height, width, raster) = pnm_raster(&bytes, path, b"P5", 1)?;
    let mut missing = Vec::with_capacity(raster.len());
    for (i, &b) in raster.iter().enumerate() {
        match b {
            255 => missing.push(true),
            0 => missing.push(false),
            other => {
                return Err(ctx(
                    path,
                    format!("mask pixel {i} has value {other}, expected 0 or 255"),
                ))
            }
        }
    }
    MaskGrid::new(height, width, missing)
}

// ---------------------------------------------------------------------------
// Palette file

pub fn write_palette(path: impl AsRef<Path>, palette: &Palette) -> Result<()> {
    let mut out = format!("BATPAL 1\n{}\n", palette.k());
    for c in palette.centroids() {
        out.push_str(&format!(
            "{} {} {}\n",
            c[0].round() as u8,
            c[1].round() as u8,
            c[2].round() as u8
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_palette(path: impl AsRef<Path>) -> Result<Palette> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("BATPAL 1") => {}
        _ => return Err(ctx(path, "expected 'BATPAL 1' header")),
    }
    let k: usize = lines
        .next()
        .and_then(|l| l.trim().parse().ok())
        .ok_or_else(|| ctx(path, "invalid centroid count"))?;
    let mut centroids = Vec::with_capacity(k);
    for i in 0..k {
        let line = lines.next().ok_or_else(|| ctx(path, format!("missing centroid {i}")))?;
        let vals: Vec<u8> = line
            .split_whitespace()
            .map(|t| t.parse::<u8>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| ctx(path, format!("invalid centroid line {i}: '{line}'")))?;
        if vals.len() != 3 {
            return Err(ctx(path, format!("centroid line {i} needs 3 channels")));
        }
        centroids.push([vals[0] as f64, vals[1] as f64, vals[2] as f64]);
    }
    Palette::from_centroids(centroids)
}

// ---------------------------------------------------------------------------
// Token-grid file

pub fn write_token_grid(path: impl AsRef<Path>, grid: &TokenGrid, vocab: usize) -> Result<()> {
    let mut out = format!("BATTOK 1 {} {} {}\n", grid.height(), grid.width(), vocab);
    for r in 0..grid.height() {
        let row: Vec<String> = (0..grid.width()).map(|c| grid.get(r, c).to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Returns the grid and the vocabulary size recorded in the header.
pub fn read_token_grid(path: impl AsRef<Path>) -> Result<(TokenGrid, usize)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| ctx(path, "empty file"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 5 || parts[0] != "BATTOK" || parts[1] != "1" {
        return Err(ctx(path, "expected 'BATTOK 1 <h> <w> <k>' header"));
    }
    let parse = |s: &str, what: &str| -> Result<usize> {
        s.parse().map_err(|_| ctx(path, format!("invalid {what}")))
    };
    let height = parse(parts[2], "height")?;
    let width = parse(parts[3], "width")?;
    let vocab = parse(parts[4], "vocab size")?;
    let mut tokens = Vec::with_capacity(height * width);
    for r in 0..height {
        let line = lines.next().ok_or_else(|| ctx(path, format!("missing row {r}")))?;
        for tok in line.split_whitespace() {
            let id = parse(tok, "token id")?;
            if id >= vocab {
                return Err(ctx(path, format!("token id {id} >= vocab {vocab}")));
            }
            tokens.push(id);
        }
        if tokens.len() != (r + 1) * width {
            return Err(ctx(path, format!("row {r} has wrong length")));
        }
    }
    Ok((TokenGrid::new(height, width, tokens)?, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskgen::random_irregular_mask;
    use crate::palette::{decode, fit_palette};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn ppm_roundtrip_bit_exact() {
        let dir = tmpdir();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = RgbGrid::new(5, 7, (0..35).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect())
            .unwrap();
        let p1 = dir.path().join("a.ppm");
        let p2 = dir.path().join("b.ppm");
        write_ppm(&p1, &img).unwrap();
        let back = read_ppm(&p1).unwrap();
        assert_eq!(back, img);
        write_ppm(&p2, &back).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn ppm_accepts_comments() {
        let dir = tmpdir();
        let p = dir.path().join("c.ppm");
        fs::write(&p, b"P6\n# a comment\n2 1\n255\n\x01\x02\x03\x04\x05\x06").unwrap();
        let img = read_ppm(&p).unwrap();
        assert_eq!(img.pixels(), &[[1, 2, 3], [4, 5, 6]]);
    }

    #[test]
    fn pgm_roundtrip_and_validation() {
        let dir = tmpdir();
        let mask = random_irregular_mask(9, 4, 0.2, 0.6, 3).unwrap();
        let p1 = dir.path().join("m.pgm");
        write_pgm_mask(&p1, &mask).unwrap();
        assert_eq!(read_pgm_mask(&p1).unwrap(), mask);
        let p2 = dir.path().join("m2.pgm");
        write_pgm_mask(&p2, &read_pgm_mask(&p1).unwrap()).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

        let bad = dir.path().join("bad.pgm");
        fs::write(&bad, b"P5\n1 1\n255\n\x80").unwrap();
        assert!(read_pgm_mask(&bad).is_err());
    }

    #[test]
    fn palette_file_roundtrip() {
        let dir = tmpdir();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let corpus: Vec<[u8; 3]> = (0..300).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let pal = fit_palette(&corpus, 8, 9, 100).unwrap();
        let p1 = dir.path().join("p.batpal");
        let p2 = dir.path().join("p2.batpal");
        write_palette(&p1, &pal).unwrap();
        let back = read_palette(&p1).unwrap();
        write_palette(&p2, &back).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(back.k(), pal.k());
    }

    #[test]
    fn token_grid_roundtrip_and_vocab_check() {
        let dir = tmpdir();
        let grid = TokenGrid::new(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        let p1 = dir.path().join("t.battok");
        write_token_grid(&p1, &grid, 3).unwrap();
        let (back, vocab) = read_token_grid(&p1).unwrap();
        assert_eq!(back, grid);
        assert_eq!(vocab, 3);
        let p2 = dir.path().join("t2.battok");
        write_token_grid(&p2, &back, vocab).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

        let bad = dir.path().join("bad.battok");
        fs::write(&bad, "BATTOK 1 1 2 2\n0 5\n").unwrap();
        assert!(read_token_grid(&bad).is_err());
    }

    /// A small two-color grid survives decode → PPM → read → encode exactly.
    #[test]
    fn fig_sized_grid_ppm_roundtrip() {
        let dir = tmpdir();
        let pal = Palette::from_centroids(vec![[0.0; 3], [255.0; 3]]).unwrap();
        let toks = TokenGrid::new(1, 5, vec![0, 1, 1, 0, 1]).unwrap();
        let img = decode(&toks, &pal).unwrap();
        let p1 = dir.path().join("fig.ppm");
        let p2 = dir.path().join("fig2.ppm");
        write_ppm(&p1, &img).unwrap();
        let back = read_ppm(&p1).unwrap();
        assert_eq!(back, img);
        write_ppm(&p2, &back).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }
}
