//! Dataset plumbing: directory scanning, deterministic train/validation
//! splitting, batch assembly for the three input kinds (image, image+mask,
//! mask), and the synthetic spine generator used for desk-scale experiments.
//!
//! Directory layout:
//!
//! ```text
//! <root>/images/<id>.pgm
//! <root>/landmarks/<id>.csv    (optional per record)
//! <root>/angles/<id>.csv       (optional per record)
//! ```
//!
//! A training record needs at least one of landmarks or angles; when the
//! angle file is missing the triple is recomputed from the landmarks.
//! Batch preprocessing order is: histogram equalization at file bit depth,
//! max-normalization to [0, 1], bilinear resize to the configured input
//! size, then (training only) the seeded augmentation draw.

use crate::geometry::{
    cobb_angles, format_triple_exact, make_vertebra, parse_landmarks, rasterize_mask,
    read_angle_file, write_landmarks, CobbTriple, GeometryError, LandmarkLayout, LandmarkSet,
    Point, VERTEBRA_COUNT,
};
use crate::imaging::{
    augment, hist_equalize, mask_to_image, normalize_max, read_pgm, resize_bilinear,
    resize_landmarks, write_pgm, AugmentParams, GrayImage, ImageError,
};
use crate::neural::{Batch, NeuralError};
use crate::rng::Rng;
use crate::tensor::{Shape2D, Tensor};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: ImageError },
    #[error("{path}: {source}")]
    Landmarks {
        path: PathBuf,
        source: GeometryError,
    },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("missing directory {0}")]
    MissingDir(PathBuf),
    #[error("train count {requested} exceeds record count {available}")]
    SplitTooLarge { requested: usize, available: usize },
    #[error("record {id}: {reason}")]
    Record { id: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// What the network consumes per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Img,
    ImgPlusMask,
    Mask,
}

impl InputKind {
    pub fn channels(&self) -> usize {
        match self {
            InputKind::ImgPlusMask => 2,
            _ => 1,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            InputKind::Img => "img",
            InputKind::ImgPlusMask => "img_plus_mask",
            InputKind::Mask => "mask",
        }
    }

    pub fn from_str_name(name: &str) -> Option<Self> {
        match name {
            "img" => Some(InputKind::Img),
            "img_plus_mask" => Some(InputKind::ImgPlusMask),
            "mask" => Some(InputKind::Mask),
            _ => None,
        }
    }
}

/// One dataset entry: an image plus whatever annotation accompanies it.
#[derive(Debug, Clone)]
pub struct Record {
    pub id: String,
    pub image_path: PathBuf,
    pub landmarks_path: Option<PathBuf>,
    pub angles: Option<CobbTriple>,
}

/// A record excluded from use, with the reason; serialized as JSON lines.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Reject {
    pub id: String,
    pub reason: String,
}

impl Reject {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("reject serializes")
    }
}

#[derive(Debug)]
pub struct ScanOutcome {
    pub records: Vec<Record>,
    pub rejects: Vec<Reject>,
}

/// Walk the directory layout and pair images with their annotations,
/// sorted by id. With `require_targets`, records lacking both landmarks and
/// angles land in the rejects report instead of the record list; an angle
/// file missing next to landmarks is recomputed via the Cobb geometry.
pub fn scan(root: &Path, require_targets: bool) -> Result<ScanOutcome, DatasetError> {
    let images_dir = root.join("images");
    if !images_dir.is_dir() {
        return Err(DatasetError::MissingDir(images_dir));
    }
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(&images_dir).map_err(io_err(&images_dir))? {
        let entry = entry.map_err(io_err(&images_dir))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("pgm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();

    let mut records = Vec::new();
    let mut rejects = Vec::new();
    for id in ids {
        let image_path = images_dir.join(format!("{id}.pgm"));
        let lm_path = root.join("landmarks").join(format!("{id}.csv"));
        let angle_path = root.join("angles").join(format!("{id}.csv"));
        let landmarks_path = lm_path.exists().then_some(lm_path);

        let angles = if angle_path.exists() {
            let text = std::fs::read_to_string(&angle_path).map_err(io_err(&angle_path))?;
            match read_angle_file(&text) {
                Ok(t) => Some(t),
                Err(e) => {
                    rejects.push(Reject {
                        id,
                        reason: format!("angle file unreadable: {e}"),
                    });
                    continue;
                }
            }
        } else if let Some(lm_path) = &landmarks_path {
            match load_landmarks(lm_path) {
                Ok(lm) => match cobb_angles(&lm) {
                    Ok((t, _)) => Some(t),
                    Err(e) => {
                        rejects.push(Reject {
                            id,
                            reason: format!("cobb angles undefined: {e}"),
                        });
                        continue;
                    }
                },
                Err(e) => {
                    rejects.push(Reject {
                        id,
                        reason: format!("landmark file unreadable: {e}"),
                    });
                    continue;
                }
            }
        } else {
            None
        };

        if require_targets && angles.is_none() {
            rejects.push(Reject {
                id,
                reason: "no landmarks and no angles; cannot derive a training target".into(),
            });
            continue;
        }
        records.push(Record {
            id,
            image_path,
            landmarks_path,
            angles,
        });
    }
    Ok(ScanOutcome { records, rejects })
}

fn load_landmarks(path: &Path) -> Result<LandmarkSet, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    // Canonical on-disk layout: interleaved pixel coordinates. The shape
    // argument is unused for non-normalized input.
    parse_landmarks(
        &text,
        LandmarkLayout::Interleaved,
        false,
        Shape2D::new(1, 1),
    )
    .map_err(|source| DatasetError::Landmarks {
        path: path.to_path_buf(),
        source,
    })
}

/// Deterministic split: shuffle by seed, first `train_count` records train,
/// the rest validate. Disjoint and exhaustive by construction.
pub fn split(
    records: &[Record],
    train_count: usize,
    seed: u64,
) -> Result<(Vec<Record>, Vec<Record>), DatasetError> {
    if train_count > records.len() {
        return Err(DatasetError::SplitTooLarge {
            requested: train_count,
            available: records.len(),
        });
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    Rng::from_seed_and_stream(seed, 0).shuffle(&mut order);
    let train = order[..train_count]
        .iter()
        .map(|&i| records[i].clone())
        .collect();
    let val = order[train_count..]
        .iter()
        .map(|&i| records[i].clone())
        .collect();
    Ok((train, val))
}

/// Load and preprocess one record into a `[C, H, W]` input tensor:
/// equalize, max-normalize, resize, then optionally apply one augmentation
/// draw. Mask channels are rasterized from the (transformed) landmarks at
/// the target size and encoded as class/2, i.e. {0, 0.5, 1}.
pub fn record_input(
    record: &Record,
    kind: InputKind,
    size: Shape2D,
    augment_draw: Option<(&AugmentParams, u64)>,
) -> Result<Tensor, DatasetError> {
    let needs_landmarks = matches!(kind, InputKind::Mask | InputKind::ImgPlusMask);
    if needs_landmarks && record.landmarks_path.is_none() {
        return Err(DatasetError::Record {
            id: record.id.clone(),
            reason: format!("input kind {} needs landmarks", kind.as_str()),
        });
    }

    let bytes = std::fs::read(&record.image_path).map_err(io_err(&record.image_path))?;
    let raw = read_pgm(&bytes).map_err(|source| DatasetError::Image {
        path: record.image_path.clone(),
        source,
    })?;
    let original_shape = raw.shape();
    let img = map_image_err(&record.image_path, hist_equalize(&raw, 256))?;
    let img = map_image_err(&record.image_path, normalize_max(&img))?;
    let mut img = map_image_err(&record.image_path, resize_bilinear(&img, size))?;

    let mut landmarks = match &record.landmarks_path {
        Some(path) => Some(resize_landmarks(
            &load_landmarks(path)?,
            original_shape,
            size,
        )),
        None => None,
    };
    if let Some((params, draw_index)) = augment_draw {
        let (aug_img, aug_lm) = map_image_err(
            &record.image_path,
            augment(&img, landmarks.as_ref(), params, draw_index),
        )?;
        img = aug_img;
        landmarks = aug_lm;
    }

    let pixel_count = size.pixels();
    let mut data = Vec::with_capacity(kind.channels() * pixel_count);
    let mask_channel = |lm: &LandmarkSet| -> Vec<f64> {
        rasterize_mask(lm, size)
            .labels()
            .iter()
            .map(|&l| l as f64 / 2.0)
            .collect()
    };
    match kind {
        InputKind::Img => data.extend_from_slice(img.pixels()),
        InputKind::Mask => data.extend(mask_channel(landmarks.as_ref().expect("checked above"))),
        InputKind::ImgPlusMask => {
            data.extend_from_slice(img.pixels());
            data.extend(mask_channel(landmarks.as_ref().expect("checked above")));
        }
    }
    Ok(
        Tensor::new(&[kind.channels(), size.height, size.width], data)
            .expect("channel data matches shape"),
    )
}

fn map_image_err<T>(path: &Path, r: Result<T, ImageError>) -> Result<T, DatasetError> {
    r.map_err(|source| DatasetError::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug)]
pub struct BatchOutcome {
    pub batches: Vec<Batch>,
    pub rejects: Vec<Reject>,
}

/// Assemble the per-epoch batch stream: shuffle records by (seed, epoch),
/// preprocess every record, and group into batches of `batch_size` (the
/// last batch may be smaller). Targets are the angle slots divided by 90.
/// Records that cannot be assembled (missing landmarks for mask kinds,
/// unreadable files, missing targets) land in the rejects report.
/// Augmentation draws, when enabled, use draw_index = (epoch << 32) |
/// record_ordinal with the ordinal taken in the unshuffled record order.
pub fn make_batches(
    records: &[Record],
    kind: InputKind,
    size: Shape2D,
    batch_size: usize,
    augment_params: Option<&AugmentParams>,
    seed: u64,
    epoch: u64,
) -> Result<BatchOutcome, DatasetError> {
    assert!(batch_size >= 1, "batch size must be >= 1");
    let mut order: Vec<usize> = (0..records.len()).collect();
    Rng::from_seed_and_stream(seed, 0x10_0000 + epoch).shuffle(&mut order);

    let mut rows: Vec<(Tensor, CobbTriple)> = Vec::new();
    let mut rejects = Vec::new();
    for &ordinal in &order {
        let record = &records[ordinal];
        let Some(angles) = record.angles else {
            rejects.push(Reject {
                id: record.id.clone(),
                reason: "no training target".into(),
            });
            continue;
        };
        let draw = augment_params.map(|p| (p, (epoch << 32) | ordinal as u64));
        match record_input(record, kind, size, draw) {
            Ok(input) => rows.push((input, angles)),
            Err(e) => rejects.push(Reject {
                id: record.id.clone(),
                reason: e.to_string(),
            }),
        }
    }

    let sample_len = kind.channels() * size.pixels();
    let mut batches = Vec::new();
    for chunk in rows.chunks(batch_size) {
        let b = chunk.len();
        let mut inputs = Vec::with_capacity(b * sample_len);
        let mut targets = Vec::with_capacity(b * 3);
        for (input, angles) in chunk {
            inputs.extend_from_slice(input.data());
            targets.extend(angles.slots().iter().map(|a| a / 90.0));
        }
        let inputs = Tensor::new(&[b, kind.channels(), size.height, size.width], inputs)
            .expect("assembled batch shape");
        let targets = Tensor::new(&[b, 3], targets).expect("assembled target shape");
        batches.push(Batch::new(inputs, targets, None)?);
    }
    Ok(BatchOutcome { batches, rejects })
}

/// Extend a labeled batch with rows from the unlabeled pool for domain
/// adaptation: labeled rows keep their targets and get domain label 0,
/// unlabeled rows carry zero targets and domain label 1.
pub fn domain_batch(labeled: &Batch, unlabeled: &[Tensor]) -> Result<Batch, DatasetError> {
    let b_l = labeled.size();
    let b_u = unlabeled.len();
    let sample_len: usize = labeled.inputs.shape()[1..].iter().product();
    let mut inputs = labeled.inputs.data().to_vec();
    for t in unlabeled {
        if t.len() != sample_len {
            return Err(DatasetError::Record {
                id: "unlabeled".into(),
                reason: format!(
                    "unlabeled sample has {} values, labeled rows have {sample_len}",
                    t.len()
                ),
            });
        }
        inputs.extend_from_slice(t.data());
    }
    let k = labeled.targets.shape()[1];
    let mut targets = labeled.targets.data().to_vec();
    targets.extend(std::iter::repeat_n(0.0, b_u * k));
    let mut labels = vec![0.0; b_l];
    labels.extend(std::iter::repeat_n(1.0, b_u));

    let mut shape = labeled.inputs.shape().to_vec();
    shape[0] = b_l + b_u;
    Ok(Batch::new(
        Tensor::new(&shape, inputs).expect("combined inputs"),
        Tensor::new(&[b_l + b_u, k], targets).expect("combined targets"),
        Some(Tensor::new(&[b_l + b_u], labels).expect("labels")),
    )?)
}

// ---------------------------------------------------------------------------
// Synthetic spines
// ---------------------------------------------------------------------------

/// Generate `n` synthetic spine records under `out_dir` (images/, landmarks/,
/// angles/). Each record samples a smooth centerline, places 17 vertebra
/// quads of varying tilt along it, renders bright quads over a dark noisy
/// background, and stores the landmark-derived Cobb angles at full float
/// precision so they can be re-derived exactly. Byte-identical output for a
/// fixed (n, seed, size).
pub fn synth_generate(
    n: usize,
    seed: u64,
    size: Shape2D,
    out_dir: &Path,
) -> Result<Vec<Record>, DatasetError> {
    assert!(n >= 1, "need at least one record");
    let images_dir = out_dir.join("images");
    let landmarks_dir = out_dir.join("landmarks");
    let angles_dir = out_dir.join("angles");
    for dir in [&images_dir, &landmarks_dir, &angles_dir] {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }

    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("synth_{i:04}");
        let mut rng = Rng::from_seed_and_stream(seed, i as u64);
        let lm = sample_spine(&mut rng, size);
        let (angles, _) = cobb_angles(&lm).expect("sampled spines are non-degenerate");
        let image = render_spine(&lm, size, &mut rng);

        let image_path = images_dir.join(format!("{id}.pgm"));
        let bytes = write_pgm(&image).expect("synthetic images are 8-bit");
        std::fs::write(&image_path, bytes).map_err(io_err(&image_path))?;

        let lm_path = landmarks_dir.join(format!("{id}.csv"));
        std::fs::write(
            &lm_path,
            write_landmarks(&lm, LandmarkLayout::Interleaved, false, size),
        )
        .map_err(io_err(&lm_path))?;

        let angle_path = angles_dir.join(format!("{id}.csv"));
        std::fs::write(&angle_path, format!("{}\n", format_triple_exact(&angles)))
            .map_err(io_err(&angle_path))?;

        records.push(Record {
            id,
            image_path,
            landmarks_path: Some(lm_path),
            angles: Some(angles),
        });
    }
    Ok(records)
}

/// Sample one spine from a random cubic centerline: the lateral slope
/// profile x'(u) is the quadratic through three sampled slope targets (top,
/// middle, bottom of the spine), so the centerline x(u) is a cubic. The 17
/// vertebra directions follow the local tangent's perpendicular. The lateral
/// excursion is rescaled to fit the frame when the sampled slopes would push
/// the curve outside it.
fn sample_spine(rng: &mut Rng, size: Shape2D) -> LandmarkSet {
    let (h, w) = (size.height as f64, size.width as f64);
    let margin = 0.08 * h;
    let span = h - 2.0 * margin;
    let pitch = span / VERTEBRA_COUNT as f64;
    let cx = w / 2.0;

    // Tilt targets in degrees at u = 0, 0.5, 1.
    let tau_top = rng.range_f64(-35.0, 35.0);
    let tau_mid = rng.range_f64(-25.0, 25.0);
    let tau_bottom = rng.range_f64(-35.0, 35.0);
    let width_scale = rng.range_f64(0.24, 0.30) * w;
    let height = 0.74 * pitch;

    let s0 = tau_top.to_radians().tan() * span;
    let sm = tau_mid.to_radians().tan() * span;
    let s1 = tau_bottom.to_radians().tan() * span;
    // Lagrange quadratic through the three slope samples, expanded as
    // q(u) = a + b*u + c*u^2; x(u) is its integral (a cubic).
    let a = s0;
    let b = -3.0 * s0 + 4.0 * sm - s1;
    let c = 2.0 * s0 - 4.0 * sm + 2.0 * s1;
    let slope = |u: f64| a + b * u + c * u * u;
    let x_raw = |u: f64| a * u + b * u * u / 2.0 + c * u * u * u / 3.0;

    // Center the excursion and shrink it if it would leave the frame.
    let stations: Vec<f64> = (0..VERTEBRA_COUNT)
        .map(|v| (v as f64 + 0.5) / VERTEBRA_COUNT as f64)
        .collect();
    let xs: Vec<f64> = stations.iter().map(|&u| x_raw(u)).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let amplitude = xs.iter().map(|x| (x - mean).abs()).fold(0.0f64, f64::max);
    let limit = 0.22 * w;
    let shrink = if amplitude > limit {
        limit / amplitude
    } else {
        1.0
    };

    let mut corners = [[Point::new(0.0, 0.0); 4]; VERTEBRA_COUNT];
    for (v, quad) in corners.iter_mut().enumerate() {
        let u = stations[v];
        let center = Point::new(cx + shrink * (xs[v] - mean), margin + span * u);
        // Spine tangent runs down the image; the vertebra's left-to-right
        // axis is its perpendicular.
        let (tx, ty) = (shrink * slope(u), span);
        let len = (tx * tx + ty * ty).sqrt();
        let direction = [ty / len, -tx / len];
        let jitter = rng.range_f64(0.92, 1.08);
        *quad = make_vertebra(center, direction, width_scale * jitter, height);
    }
    LandmarkSet::new(corners).expect("finite synthetic corners")
}

/// Render the spine: bright vertebra bodies, mid-grey gaps, dark background,
/// plus a uniform noise floor. Pixel values are integers so the PGM round
/// trip is lossless.
fn render_spine(lm: &LandmarkSet, size: Shape2D, rng: &mut Rng) -> GrayImage {
    let mask = rasterize_mask(lm, size);
    let base = mask_to_image(&mask);
    let pixels: Vec<f64> = base
        .pixels()
        .iter()
        .map(|&level| {
            let signal = match level {
                255.0 => 215.0, // bone
                128.0 => 70.0,  // gap between bones
                _ => 25.0,      // background
            };
            (signal + rng.range_f64(-12.0, 12.0))
                .round()
                .clamp(0.0, 255.0)
        })
        .collect();
    GrayImage::new(size, pixels, 255.0).expect("rendered pixels in range")
}
