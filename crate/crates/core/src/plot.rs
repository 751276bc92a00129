//! Static SVG plots from a run directory: a convergence curve and a 2-D
//! projection of pixel and class embeddings.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use plotters::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::IGNORE;
use crate::checkpoint;
use crate::data::{class_color, generate_dataset};
use crate::encoders::{batch_images, Image, STRIDES};
use crate::error::{Error, Result};
use crate::params::Graph;
use crate::train::{read_eval_log, read_metrics, RunFiles};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Projection {
    #[default]
    Pca,
    /// Stochastic neighbour embedding with a seeded start.
    Tsne,
}

impl std::str::FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(Projection::Pca),
            "tsne" | "t-sne" => Ok(Projection::Tsne),
            other => Err(Error::UnknownVariant {
                kind: "projection",
                value: other.to_string(),
            }),
        }
    }
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.display().to_string()))
    }
}

fn range(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
        (a.min(x), b.max(x))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

/// Training loss and validation mIoU against step, written to
/// `convergence.svg` in the run directory.
pub fn plot_convergence(run_dir: &Path) -> Result<PathBuf> {
    let metrics_path = run_dir.join(RunFiles::METRICS);
    require(&metrics_path)?;
    let metrics = read_metrics(&metrics_path)?;
    if metrics.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "{} has no records",
            metrics_path.display()
        )));
    }
    let evals = match run_dir.join(RunFiles::EVAL_LOG) {
        p if p.is_file() => read_eval_log(&p)?,
        _ => Vec::new(),
    };
    let out = run_dir.join("convergence.svg");
    let last = metrics.last().map(|r| r.step + 1).unwrap_or(1) as f64;
    {
        let root = SVGBackend::new(&out, (800, 600)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let (top, bottom) = root.split_vertically(300);

        let (lo, hi) = range(metrics.iter().map(|r| r.total));
        let mut chart = ChartBuilder::on(&top)
            .caption("training loss", ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(0f64..last, lo..hi)
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc("step").draw().map_err(plot_err)?;
        chart
            .draw_series(LineSeries::new(
                metrics.iter().map(|r| (r.step as f64, r.total)),
                &BLUE,
            ))
            .map_err(plot_err)?;

        let mut chart = ChartBuilder::on(&bottom)
            .caption("validation mIoU", ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(0f64..last, 0f64..1f64)
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc("step").draw().map_err(plot_err)?;
        let pts: Vec<(f64, f64)> = evals.iter().map(|e| (e.step as f64, e.miou)).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), &RED))
            .map_err(plot_err)?;
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, RED.filled())))
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPlot {
    pub projection: Projection,
    pub pixels: Vec<ProjectedPoint>,
    /// One point per class embedding.
    pub text: Vec<ProjectedPoint>,
    pub svg: PathBuf,
}

/// Two leading principal axes of the rows of `x` (n, d).
pub fn pca_2d(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows().max(1) as f64;
    let mean = x.row_mean();
    let mut centred = x.clone();
    for mut r in centred.row_iter_mut() {
        r -= &mean;
    }
    let cov = centred.transpose() * &centred / n;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let d = x.ncols();
    let mut basis = DMatrix::zeros(d, 2);
    for (j, &i) in order.iter().take(2).enumerate() {
        let mut v = eig.eigenvectors.column(i).clone_owned();
        // Fix the sign so the output is deterministic.
        let big = v.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if big < 0.0 {
            v = -v;
        }
        basis.set_column(j, &v);
    }
    centred * basis
}

fn sq_dists(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (x.row(i) - x.row(j)).norm_squared();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Exact t-SNE with a binary search for the per-point bandwidth, early
/// exaggeration and momentum gradient descent.
pub fn tsne_2d(x: &DMatrix<f64>, perplexity: f64, iters: usize, seed: u64) -> DMatrix<f64> {
    let n = x.nrows();
    if n < 3 {
        return pca_2d(x);
    }
    let d = sq_dists(x);
    let target = perplexity.min((n - 1) as f64 / 3.0).max(1.0).ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        for _ in 0..60 {
            let mut sum = 0.0;
            let mut hsum = 0.0;
            for j in 0..n {
                if j != i {
                    let w = (-beta * d[i * n + j]).exp();
                    p[i * n + j] = w;
                    sum += w;
                    hsum += w * d[i * n + j];
                }
            }
            let sum = sum.max(1e-300);
            let entropy = sum.ln() + beta * hsum / sum;
            for j in 0..n {
                p[i * n + j] /= sum;
            }
            if (entropy - target).abs() < 1e-5 {
                break;
            }
            if entropy > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    let mut pj = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            pj[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.gen_range(-1e-2..1e-2), rng.gen_range(-1e-2..1e-2)])
        .collect();
    let mut vel = vec![[0.0; 2]; n];
    let mut q = vec![0.0; n * n];
    let lr = (n as f64 / 12.0).max(10.0);
    for it in 0..iters {
        let exag = if it < 100 { 4.0 } else { 1.0 };
        let momentum = if it < 100 { 0.5 } else { 0.8 };
        let mut qsum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let w = 1.0 / (1.0 + dx * dx + dy * dy);
                q[i * n + j] = w;
                q[j * n + i] = w;
                qsum += 2.0 * w;
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = q[i * n + j];
                let m = (exag * pj[i * n + j] - w / qsum) * w;
                g[0] += 4.0 * m * (y[i][0] - y[j][0]);
                g[1] += 4.0 * m * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                vel[i][k] = momentum * vel[i][k] - lr * g[k];
            }
        }
        for i in 0..n {
            y[i][0] += vel[i][0];
            y[i][1] += vel[i][1];
        }
    }
    DMatrix::from_fn(n, 2, |i, k| y[i][k])
}

/// Projects stride-32 pixel embeddings of up to `max_images` validation
/// images together with the class embeddings, writing `embeddings.svg` and
/// `embeddings.json`. Class embeddings that depend on the image are
/// averaged over the images.
pub fn plot_embeddings(
    run_dir: &Path,
    projection: Projection,
    max_images: usize,
    seed: u64,
) -> Result<EmbeddingPlot> {
    let ck_path = run_dir.join(RunFiles::CHECKPOINT);
    require(&ck_path)?;
    let ck = checkpoint::load(&ck_path)?;
    let model = ck.model()?;
    let data = generate_dataset(&ck.config.dataset_spec())?;
    let samples = if data.val.is_empty() { &data.train } else { &data.val };
    let samples = &samples[..samples.len().min(max_images.max(1))];
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();

    let mut g = Graph::new(&ck.store, false);
    let x = g.input(batch_images(&images)?);
    let out = model.encode_and_align(&mut g, x)?;
    let feat = g.tape.value(out.pyramid.levels[3]).clone();
    let text = g.tape.value(out.text).clone();
    let (h, w) = out.pyramid.sizes[3];
    let c = model.cfg.embed_dim;
    let k = model.cfg.num_classes;
    let b = images.len();
    let normalize = model.cfg.normalize_embeddings;
    let unit = |v: &[f64]| -> Vec<f64> {
        if !normalize {
            return v.to_vec();
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|a| a / n).collect()
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut classes = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let labels = s.labels.resize_nearest(h, w);
        for p in 0..h * w {
            let l = labels.labels[p];
            if l == IGNORE {
                continue;
            }
            rows.push(unit(feat.row(i * h * w + p)));
            classes.push(l as usize);
        }
    }
    let npix = rows.len();
    for kk in 0..k {
        let mut avg = vec![0.0; c];
        for i in 0..b {
            for (a, v) in avg.iter_mut().zip(text.row(i * k + kk)) {
                *a += v / b as f64;
            }
        }
        rows.push(unit(&avg));
    }
    let m = DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j]);
    let y = match projection {
        Projection::Pca => pca_2d(&m),
        Projection::Tsne => tsne_2d(&m, 30.0, 500, seed),
    };
    let point = |i: usize, class: usize| ProjectedPoint {
        x: y[(i, 0)],
        y: y[(i, 1)],
        class,
    };
    let pixels: Vec<ProjectedPoint> = (0..npix).map(|i| point(i, classes[i])).collect();
    let text_pts: Vec<ProjectedPoint> = (0..k).map(|kk| point(npix + kk, kk)).collect();

    let svg = run_dir.join("embeddings.svg");
    {
        let root = SVGBackend::new(&svg, (700, 700)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let all = pixels.iter().chain(&text_pts);
        let (x0, x1) = range(all.clone().map(|p| p.x));
        let (y0, y1) = range(all.map(|p| p.y));
        let title = match projection {
            Projection::Pca => "pixel and class embeddings (PCA)",
            Projection::Tsne => "pixel and class embeddings (t-SNE)",
        };
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(40)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(plot_err)?;
        chart.configure_mesh().draw().map_err(plot_err)?;
        let colour = |cls: usize| {
            let [r, g, b] = class_color(cls, k);
            RGBColor((r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8)
        };
        chart
            .draw_series(
                pixels
                    .iter()
                    .map(|p| Circle::new((p.x, p.y), 2, colour(p.class).mix(0.6).filled())),
            )
            .map_err(plot_err)?;
        chart
            .draw_series(text_pts.iter().map(|p| {
                TriangleMarker::new((p.x, p.y), 8, colour(p.class).filled())
            }))
            .map_err(plot_err)?;
        chart
            .draw_series(
                text_pts
                    .iter()
                    .map(|p| TriangleMarker::new((p.x, p.y), 8, BLACK.stroke_width(1))),
            )
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    let plot = EmbeddingPlot {
        projection,
        pixels,
        text: text_pts,
        svg,
    };
    std::fs::write(
        run_dir.join("embeddings.json"),
        serde_json::to_string_pretty(&plot)?,
    )?;
    Ok(plot)
}

/// Stride of the pixel embeddings used by [`plot_embeddings`].
pub const EMBEDDING_STRIDE: usize = STRIDES[3];
