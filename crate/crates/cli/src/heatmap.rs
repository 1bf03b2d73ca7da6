//! Text renderings of a layer-by-layer similarity matrix: CSV with six
//! decimals and a plain (P2) portable graymap, 0 = disjoint, 255 = identical.

use chunkkv::SimilarityMatrix;

pub const MAX_GRAY: u32 = 255;

pub fn to_csv(m: &SimilarityMatrix) -> String {
    let mut out = String::new();
    for i in 0..m.n {
        let row: Vec<String> = (0..m.n).map(|j| format!("{:.6}", m.get(i, j))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<Vec<f64>>, String> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
                .collect()
        })
        .collect()
}

fn gray(v: f64) -> u32 {
    (v.clamp(0.0, 1.0) * f64::from(MAX_GRAY)).round() as u32
}

pub fn to_pgm(m: &SimilarityMatrix) -> String {
    let mut out = format!("P2\n{} {}\n{MAX_GRAY}\n", m.n, m.n);
    for i in 0..m.n {
        let row: Vec<String> = (0..m.n).map(|j| gray(m.get(i, j)).to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Parsed plain graymap: width, height, max level and pixels row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub max: u32,
    pub pixels: Vec<u32>,
}

pub fn parse_pgm(text: &str) -> Result<Graymap, String> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return Err("missing P2 magic".into());
    }
    let mut num = |what: &str| -> Result<usize, String> {
        tokens
            .next()
            .ok_or_else(|| format!("missing {what}"))?
            .parse::<usize>()
            .map_err(|e| format!("{what}: {e}"))
    };
    let width = num("width")?;
    let height = num("height")?;
    let max = num("max level")? as u32;
    let pixels = (0..width * height)
        .map(|_| num("pixel").map(|p| p as u32))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Graymap {
        width,
        height,
        max,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chunkkv::reuse::similarity_matrix;
    use chunkkv::KeptIndices;

    fn sets(v: &[&[usize]]) -> Vec<KeptIndices> {
        v.iter()
            .map(|s| KeptIndices::from_sorted(s.to_vec(), 10).unwrap())
            .collect()
    }

    #[test]
    fn identical_layers_render_at_max_level() {
        let m = similarity_matrix(&sets(&[&[1, 2], &[1, 2]])).unwrap();
        assert_eq!(to_pgm(&m), "P2\n2 2\n255\n255 255\n255 255\n");
    }

    #[test]
    fn csv_round_trips_to_three_decimals() {
        let m = similarity_matrix(&sets(&[&[1, 2, 3], &[2, 3, 4], &[7]])).unwrap();
        let parsed = parse_csv(&to_csv(&m)).unwrap();
        for (i, row) in parsed.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((v - m.get(i, j)).abs() < 5e-4);
            }
        }
        assert_eq!(parsed[0][1], 0.5);
    }

    #[test]
    fn graymap_header_matches_layer_count() {
        let m = similarity_matrix(&sets(&[&[1], &[1, 2], &[3], &[4]])).unwrap();
        let g = parse_pgm(&to_pgm(&m)).unwrap();
        assert_eq!((g.width, g.height, g.max), (4, 4, 255));
        assert_eq!(g.pixels[1], 128);
        assert_eq!(g.pixels[2], 0);
    }
}
