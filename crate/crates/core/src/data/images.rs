use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use super::{DataError, LabeledDataset, Result};

/// Orders strings with embedded numbers numerically (`obj2` < `obj10`).
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    let (mut x, mut y) = (a.as_bytes(), b.as_bytes());
    loop {
        match (x.first(), y.first()) {
            (None, None) => return a.cmp(b),
            (None, _) => return Ordering::Less,
            (_, None) => return Ordering::Greater,
            (Some(p), Some(q)) if p.is_ascii_digit() && q.is_ascii_digit() => {
                let la = x.iter().take_while(|c| c.is_ascii_digit()).count();
                let lb = y.iter().take_while(|c| c.is_ascii_digit()).count();
                let (da, db) = (&x[..la], &y[..lb]);
                let ta = trim_zeros(da);
                let tb = trim_zeros(db);
                let ord = ta.len().cmp(&tb.len()).then_with(|| ta.cmp(tb));
                if ord != Ordering::Equal {
                    return ord;
                }
                x = &x[la..];
                y = &y[lb..];
            }
            (Some(p), Some(q)) => {
                if p != q {
                    return p.cmp(q);
                }
                x = &x[1..];
                y = &y[1..];
            }
        }
    }
}

fn trim_zeros(d: &[u8]) -> &[u8] {
    let z = d.iter().take_while(|&&c| c == b'0').count();
    &d[z.min(d.len().saturating_sub(1))..]
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn bilinear_resize(src: &[f64], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, oh, h);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, ow, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "pgm" | "pnm")
    )
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let io = |source| DataError::Io { path: dir.display().to_string(), source };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let p = entry.map_err(io)?.path();
        if (want_dirs && p.is_dir()) || (!want_dirs && p.is_file() && is_image(&p)) {
            out.push(p);
        }
    }
    out.sort_by(|a, b| natural_cmp(&a.file_name().unwrap().to_string_lossy(), &b.file_name().unwrap().to_string_lossy()));
    Ok(out)
}

fn decode_gray(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let err = |reason: String| DataError::Image { path: path.display().to_string(), reason };
    let bytes = std::fs::read(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let img = image::load_from_memory(&bytes).map_err(|e| err(e.to_string()))?;
    let gray = img.to_luma32f();
    let (w, h) = gray.dimensions();
    let px = gray.into_raw().into_iter().map(|v| f64::from(v).clamp(0.0, 1.0)).collect();
    Ok((h as usize, w as usize, px))
}

/// Loads `<root>/<class>/<image>` trees. Classes are numbered by natural
/// order of directory name; images within a class keep natural filename
/// order. PNG and PGM/PNM files are decoded, converted to gray, bilinearly
/// resized to `resize` and scaled to [0, 1].
pub fn load_image_directory(root: impl AsRef<Path>, resize: (usize, usize)) -> Result<LabeledDataset> {
    let root = root.as_ref();
    let class_dirs = sorted_entries(root, true)?;
    if class_dirs.is_empty() {
        return Err(DataError::NoClasses(root.display().to_string()));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    let mut sample_names = Vec::new();
    for (c, dir) in class_dirs.iter().enumerate() {
        let files = sorted_entries(dir, false)?;
        if files.is_empty() {
            return Err(DataError::EmptyClass(dir.display().to_string()));
        }
        class_names.push(dir.file_name().unwrap().to_string_lossy().into_owned());
        for f in files {
            let (h, w, px) = decode_gray(&f)?;
            pixels.extend(bilinear_resize(&px, (h, w), resize).into_iter().map(|v| v.clamp(0.0, 1.0)));
            labels.push(c);
            sample_names.push(f.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    let name = root.file_name().map_or_else(|| "images".to_string(), |n| n.to_string_lossy().into_owned());
    let mut ds = LabeledDataset::new(name, resize, pixels, labels, class_names)?;
    ds.sample_names = sample_names;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn natural_order() {
        let mut v = vec!["obj10", "obj2", "obj1", "obj1__10.png", "obj1__9.png"];
        v.sort_by(|a, b| natural_cmp(a, b));
        assert_eq!(v, vec!["obj1", "obj1__9.png", "obj1__10.png", "obj2", "obj10"]);
        assert_eq!(natural_cmp("a007", "a7"), Ordering::Less);
    }

    #[test]
    fn resize_constant_and_identity() {
        let src = vec![0.25; 12];
        assert!(bilinear_resize(&src, (3, 4), (7, 5)).iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let ramp: Vec<f64> = (0..6).map(|i| i as f64).collect();
        assert_eq!(bilinear_resize(&ramp, (2, 3), (2, 3)), ramp);
        // 2x downsample of a 4-wide ramp averages neighbouring pairs
        let r = bilinear_resize(&[0.0, 1.0, 2.0, 3.0], (1, 4), (1, 2));
        assert_eq!(r, vec![0.5, 2.5]);
    }
}
