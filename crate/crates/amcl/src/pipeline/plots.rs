//! Static plot emission: loss curves, ROC curves and mask galleries,
//! rendered directly to PNG with an embedded 5×7 bitmap font.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::data::IMAGE_SIZE;
use crate::error::{AmclError, Result};

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;

/// 5×7 glyphs; '#' marks a lit pixel. Lowercase input is uppercased.
fn glyph(c: char) -> [&'static str; 7] {
    match c.to_ascii_uppercase() {
        'A' => [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
        'B' => ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."],
        'C' => [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."],
        'D' => ["####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."],
        'E' => ["#####", "#....", "#....", "####.", "#....", "#....", "#####"],
        'F' => ["#####", "#....", "#....", "####.", "#....", "#....", "#...."],
        'G' => [".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".###."],
        'H' => ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
        'I' => [".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."],
        'J' => ["..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."],
        'K' => ["#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"],
        'L' => ["#....", "#....", "#....", "#....", "#....", "#....", "#####"],
        'M' => ["#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"],
        'N' => ["#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"],
        'O' => [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
        'P' => ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."],
        'Q' => [".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"],
        'R' => ["####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"],
        'S' => [".####", "#....", "#....", ".###.", "....#", "....#", "####."],
        'T' => ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."],
        'U' => ["#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
        'V' => ["#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."],
        'W' => ["#...#", "#...#", "#...#", "#.#.#", "#.#.#", "##.##", "#...#"],
        'X' => ["#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"],
        'Y' => ["#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."],
        'Z' => ["#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"],
        '0' => [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
        '1' => ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
        '2' => [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
        '3' => ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
        '4' => ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
        '5' => ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
        '6' => ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
        '7' => ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
        '8' => [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
        '9' => [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
        '.' => [".....", ".....", ".....", ".....", ".....", ".##..", ".##.."],
        ',' => [".....", ".....", ".....", ".....", ".##..", "..#..", ".#..."],
        '-' => [".....", ".....", ".....", "#####", ".....", ".....", "....."],
        ':' => [".....", ".##..", ".##..", ".....", ".##..", ".##..", "....."],
        '%' => ["##..#", "##..#", "...#.", "..#..", ".#...", "#..##", "#..##"],
        '/' => ["....#", "....#", "...#.", "..#..", ".#...", "#....", "#...."],
        '_' => [".....", ".....", ".....", ".....", ".....", ".....", "#####"],
        '(' => ["..#..", ".#...", "#....", "#....", "#....", ".#...", "..#.."],
        ')' => ["..#..", "...#.", "....#", "....#", "....#", "...#.", "..#.."],
        _ => [".....", ".....", ".....", ".....", ".....", ".....", "....."],
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: Rgb<u8>) {
    let mut cx = x;
    for c in text.chars() {
        let pattern = glyph(c);
        for (gy, row) in pattern.iter().enumerate() {
            for (gx, cell) in row.chars().enumerate() {
                if cell == '#' {
                    let (px, py) = (cx + gx as i64, y + gy as i64);
                    if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height()
                    {
                        img.put_pixel(px as u32, py as u32, color);
                    }
                }
            }
        }
        cx += (GLYPH_W + 1) as i64;
    }
}

fn text_width(text: &str) -> i64 {
    (text.chars().count() * (GLYPH_W + 1)) as i64
}

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = x0 + (x1 - x0) * t;
        let y = y0 + (y1 - y0) * t;
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

/// One named curve.
pub struct PlotSeries {
    pub label: String,
    pub color: [u8; 3],
    pub points: Vec<(f64, f64)>,
}

pub const SERIES_COLORS: [[u8; 3]; 5] = [
    [196, 64, 48],
    [48, 96, 196],
    [32, 144, 64],
    [160, 80, 176],
    [192, 140, 32],
];

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 480;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_B: f64 = 44.0;

/// Render a line plot with axes, ticks and a legend.
pub fn line_plot(
    path: &Path,
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &[PlotSeries],
) -> Result<()> {
    let points: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().cloned()).collect();
    if points.is_empty() {
        return Err(AmclError::MissingArtifact(format!(
            "no data points for plot {title:?}"
        )));
    }
    let (mut x0, mut x1) = points
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let (mut y0, mut y1) = points
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    if x0 == x1 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y0 == y1 {
        y0 -= 0.5;
        y1 += 0.5;
    }

    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let black = Rgb([0, 0, 0]);
    let gray = Rgb([208, 208, 208]);
    let inner_w = PLOT_W as f64 - MARGIN_L - MARGIN_R;
    let inner_h = PLOT_H as f64 - MARGIN_T - MARGIN_B;
    let to_px = |x: f64, y: f64| {
        (
            MARGIN_L + (x - x0) / (x1 - x0) * inner_w,
            PLOT_H as f64 - MARGIN_B - (y - y0) / (y1 - y0) * inner_h,
        )
    };

    // Grid and ticks.
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let (px, _) = to_px(fx, y0);
        let (_, py) = to_px(x0, fy);
        draw_line(&mut img, px, MARGIN_T, px, PLOT_H as f64 - MARGIN_B, gray);
        draw_line(&mut img, MARGIN_L, py, PLOT_W as f64 - MARGIN_R, py, gray);
        let xt = fmt_tick(fx);
        draw_text(
            &mut img,
            px as i64 - text_width(&xt) / 2,
            (PLOT_H as f64 - MARGIN_B) as i64 + 6,
            &xt,
            black,
        );
        let yt = fmt_tick(fy);
        draw_text(
            &mut img,
            MARGIN_L as i64 - text_width(&yt) - 6,
            py as i64 - (GLYPH_H as i64) / 2,
            &yt,
            black,
        );
    }
    // Axes box.
    draw_line(&mut img, MARGIN_L, MARGIN_T, MARGIN_L, PLOT_H as f64 - MARGIN_B, black);
    draw_line(
        &mut img,
        MARGIN_L,
        PLOT_H as f64 - MARGIN_B,
        PLOT_W as f64 - MARGIN_R,
        PLOT_H as f64 - MARGIN_B,
        black,
    );

    for s in series {
        let color = Rgb(s.color);
        let mut prev: Option<(f64, f64)> = None;
        for &(x, y) in &s.points {
            let p = to_px(x, y);
            if let Some(q) = prev {
                draw_line(&mut img, q.0, q.1, p.0, p.1, color);
                draw_line(&mut img, q.0, q.1 + 1.0, p.0, p.1 + 1.0, color);
            }
            prev = Some(p);
        }
    }

    draw_text(&mut img, MARGIN_L as i64, 8, title, black);
    draw_text(
        &mut img,
        (PLOT_W as f64 / 2.0) as i64 - text_width(xlabel) / 2,
        PLOT_H as i64 - 14,
        xlabel,
        black,
    );
    draw_text(&mut img, 4, 8, ylabel, black);

    // Legend, top-right.
    let mut ly = MARGIN_T as i64 + 6;
    for s in series {
        let lx = (PLOT_W as f64 - MARGIN_R) as i64 - 120;
        for dy in 0..7 {
            for dx in 0..10 {
                let (px, py) = (lx + dx, ly + dy);
                if px >= 0 && py >= 0 {
                    img.put_pixel(px as u32, py as u32, Rgb(s.color));
                }
            }
        }
        draw_text(&mut img, lx + 14, ly, &s.label, black);
        ly += 12;
    }

    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| AmclError::io(parent, e))?;
    }
    img.save(path)
        .map_err(|e| AmclError::Dataset(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// Gallery margin between tiles, pixels.
pub const GALLERY_MARGIN: usize = 4;

/// Tile grayscale fields into a `grid × grid` gallery. With 64×64 tiles and
/// an 8×8 grid the image is 512×512 of content plus margins.
pub fn tile_gallery(path: &Path, tiles: &[Array2<f64>], grid: usize) -> Result<()> {
    if tiles.is_empty() {
        return Err(AmclError::MissingArtifact("no tiles for gallery".into()));
    }
    let side = grid * IMAGE_SIZE + (grid + 1) * GALLERY_MARGIN;
    let mut img = RgbImage::from_pixel(side as u32, side as u32, Rgb([32, 32, 32]));
    for (idx, tile) in tiles.iter().take(grid * grid).enumerate() {
        let (gy, gx) = (idx / grid, idx % grid);
        let oy = GALLERY_MARGIN + gy * (IMAGE_SIZE + GALLERY_MARGIN);
        let ox = GALLERY_MARGIN + gx * (IMAGE_SIZE + GALLERY_MARGIN);
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let v = (tile[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put_pixel((ox + x) as u32, (oy + y) as u32, Rgb([v, v, v]));
            }
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| AmclError::io(parent, e))?;
    }
    img.save(path)
        .map_err(|e| AmclError::Dataset(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// Expected gallery side length for a given grid.
pub fn gallery_side(grid: usize) -> usize {
    grid * IMAGE_SIZE + (grid + 1) * GALLERY_MARGIN
}

fn read_csv_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| AmclError::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .unwrap_or("")
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>().unwrap_or(f64::NAN))
            .collect();
        rows.push(row);
    }
    Ok((header, rows))
}

/// What `emit_plots` produced and what it had to skip (with reasons).
#[derive(Debug, Default)]
pub struct PlotOutcome {
    pub written: Vec<PathBuf>,
    pub skipped: Vec<(String, String)>,
}

/// Render every plot whose input artifacts are present in `output_dir`.
/// Fails only when *nothing* can be plotted, listing what is absent.
pub fn emit_plots(output_dir: &Path, seed: u64) -> Result<PlotOutcome> {
    let mut outcome = PlotOutcome::default();
    let skip = |name: &str, reason: String, outcome: &mut PlotOutcome| {
        outcome.skipped.push((name.to_string(), reason));
    };

    // GAN loss curve.
    let gan_csv = output_dir.join("gan_loss.csv");
    if gan_csv.exists() {
        let (_, rows) = read_csv_columns(&gan_csv)?;
        let d: Vec<(f64, f64)> = rows.iter().map(|r| (r[0], r[1])).collect();
        let g: Vec<(f64, f64)> = rows.iter().map(|r| (r[0], r[2])).collect();
        let path = output_dir.join("gan_loss.png");
        line_plot(
            &path,
            "MASK GAN TRAINING",
            "EPOCH",
            "LOSS",
            &[
                PlotSeries { label: "D LOSS".into(), color: SERIES_COLORS[0], points: d },
                PlotSeries { label: "G LOSS".into(), color: SERIES_COLORS[1], points: g },
            ],
        )?;
        outcome.written.push(path);
    } else {
        skip("gan_loss.png", format!("missing {}", gan_csv.display()), &mut outcome);
    }

    // Pretraining loss curves, one series per phase.
    let pre_csv = output_dir.join("pretrain_history.csv");
    if pre_csv.exists() {
        let text = fs::read_to_string(&pre_csv).map_err(|e| AmclError::io(&pre_csv, e))?;
        let mut enc = Vec::new();
        let mut lat = Vec::new();
        for line in text.lines().skip(1) {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() < 5 {
                continue;
            }
            let epoch: f64 = parts[0].parse().unwrap_or(f64::NAN);
            let loss: f64 = parts[3].parse().unwrap_or(f64::NAN);
            match parts[1] {
                "encoder" => enc.push((epoch, loss)),
                "latent" => lat.push((epoch, loss)),
                _ => {}
            }
        }
        let mut series = vec![PlotSeries {
            label: "ENCODER".into(),
            color: SERIES_COLORS[1],
            points: enc,
        }];
        if !lat.is_empty() {
            series.push(PlotSeries {
                label: "LATENT".into(),
                color: SERIES_COLORS[0],
                points: lat,
            });
        }
        let path = output_dir.join("pretrain_loss.png");
        line_plot(&path, "CONTRASTIVE PRETRAINING", "EPOCH", "LOSS", &series)?;
        outcome.written.push(path);
    } else {
        skip("pretrain_loss.png", format!("missing {}", pre_csv.display()), &mut outcome);
    }

    // Fine-tuning loss curve.
    let ft_csv = output_dir.join("finetune_loss.csv");
    if ft_csv.exists() {
        let (_, rows) = read_csv_columns(&ft_csv)?;
        let path = output_dir.join("finetune_loss.png");
        line_plot(
            &path,
            "FINE-TUNING",
            "EPOCH",
            "LOSS",
            &[PlotSeries {
                label: "TRAIN CE".into(),
                color: SERIES_COLORS[2],
                points: rows.iter().map(|r| (r[0], r[1])).collect(),
            }],
        )?;
        outcome.written.push(path);
    } else {
        skip("finetune_loss.png", format!("missing {}", ft_csv.display()), &mut outcome);
    }

    // ROC: one curve per evaluated mode (comparison reports) or the single
    // evaluation report.
    let mut roc_series = Vec::new();
    for (i, mode) in ["scratch", "simclr", "amcl"].iter().enumerate() {
        let p = output_dir.join(format!("report_{mode}.json"));
        if p.exists() {
            if let Some(points) = read_roc_json(&p)? {
                roc_series.push(PlotSeries {
                    label: mode.to_uppercase(),
                    color: SERIES_COLORS[i],
                    points,
                });
            }
        }
    }
    if roc_series.is_empty() {
        let p = output_dir.join("report.json");
        if p.exists() {
            if let Some(points) = read_roc_json(&p)? {
                roc_series.push(PlotSeries {
                    label: "EVAL".into(),
                    color: SERIES_COLORS[0],
                    points,
                });
            }
        }
    }
    if !roc_series.is_empty() {
        let path = output_dir.join("roc.png");
        line_plot(&path, "ROC", "FAR", "GAR", &roc_series)?;
        outcome.written.push(path);
    } else {
        skip("roc.png", "missing report.json / report_<mode>.json".into(), &mut outcome);
    }

    // Mask galleries from the trained generator.
    let gen_path = output_dir.join("gan_generator.ckpt");
    if gen_path.exists() {
        let mut generator = crate::gan::load_generator(&gen_path)?;
        let mut rng = crate::rng::stream(seed, "plots:gallery");
        let zs = crate::gan::sample_latents(64, generator.arch.latent_dim, &mut rng);
        let masks = crate::gan::sample_masks(&mut generator, &zs)?;
        let tiles: Vec<Array2<f64>> = masks.iter().map(|m| m.as_field()).collect();
        let path = output_dir.join("mask_gallery.png");
        tile_gallery(&path, &tiles, 8)?;
        outcome.written.push(path);

        // Masked images need the dataset too.
        let dataset_dir = output_dir.join("dataset");
        if dataset_dir.is_dir() {
            let split = crate::data::load_image_directory(
                &dataset_dir,
                &crate::data::DirectoryLayout::default(),
            )?;
            let tiles: Vec<Array2<f64>> = split
                .train
                .iter()
                .take(64)
                .zip(&masks)
                .map(|(img, m)| crate::masking::apply_mask(img, m).map(|i| i.pixels))
                .collect::<Result<_>>()?;
            let path = output_dir.join("masked_gallery.png");
            tile_gallery(&path, &tiles, 8)?;
            outcome.written.push(path);
        } else {
            skip(
                "masked_gallery.png",
                format!("missing {}", dataset_dir.display()),
                &mut outcome,
            );
        }
    } else {
        skip("mask_gallery.png", format!("missing {}", gen_path.display()), &mut outcome);
        skip("masked_gallery.png", "missing generator checkpoint".into(), &mut outcome);
    }

    if outcome.written.is_empty() {
        let absent: Vec<String> = outcome
            .skipped
            .iter()
            .map(|(name, reason)| format!("{name} ({reason})"))
            .collect();
        return Err(AmclError::MissingArtifact(format!(
            "nothing to plot; absent inputs: {}",
            absent.join(", ")
        )));
    }
    Ok(outcome)
}

fn read_roc_json(path: &Path) -> Result<Option<Vec<(f64, f64)>>> {
    let text = fs::read_to_string(path).map_err(|e| AmclError::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| AmclError::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(value.get("roc").and_then(|r| r.as_array()).map(|arr| {
        arr.iter()
            .filter_map(|p| {
                let pair = p.as_array()?;
                Some((pair.first()?.as_f64()?, pair.get(1)?.as_f64()?))
            })
            .collect()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gallery_dimensions_follow_the_layout_arithmetic() {
        // 8x8 grid of 64x64 tiles: 512x512 of content plus 9 margins.
        assert_eq!(gallery_side(8), 512 + 9 * GALLERY_MARGIN);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let tiles: Vec<Array2<f64>> = (0..64)
            .map(|i| Array2::from_elem((IMAGE_SIZE, IMAGE_SIZE), i as f64 / 63.0))
            .collect();
        tile_gallery(&path, &tiles, 8).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!(img.width() as usize, gallery_side(8));
        assert_eq!(img.height() as usize, gallery_side(8));
    }

    #[test]
    fn line_plot_writes_a_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        line_plot(
            &path,
            "TEST",
            "X",
            "Y",
            &[PlotSeries {
                label: "S1".into(),
                color: SERIES_COLORS[0],
                points: (0..20).map(|i| (i as f64, (i as f64 * 0.3).sin())).collect(),
            }],
        )
        .unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!((img.width(), img.height()), (PLOT_W, PLOT_H));
    }

    #[test]
    fn emit_plots_with_nothing_present_lists_absences() {
        let dir = tempfile::tempdir().unwrap();
        let err = emit_plots(dir.path(), 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("gan_loss"), "{msg}");
        assert!(msg.contains("roc.png"), "{msg}");
    }
}
