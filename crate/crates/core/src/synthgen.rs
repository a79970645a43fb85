//! Synthetic corpora with planted per-user ranking functions.
//!
//! Every tag gets a unit latent vector and every user a latent weight vector.
//! An image draws a scene vector, pulled toward its owner's preference
//! direction by `scene_focus`; the tags closest to the scene are visible on
//! it, and its feature vector is a fixed projection of the visible tags' mean
//! latent, so visually close images share tags. The user lists the visible
//! tags with the highest `w*·latent(t) + N(0, σ²)`, best first.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::RawRecord;
use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_users: usize,
    pub images_per_user: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub tags_per_image: usize,
    /// Tags visible on an image, from which the user picks `tags_per_image`.
    pub visible_tags: usize,
    pub latent_dim: usize,
    /// Pull of each scene toward its user's preference direction; 0 draws
    /// scenes isotropically.
    pub scene_focus: f64,
    /// Standard deviation of the per-tag score noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_users: 20,
            images_per_user: 40,
            vocab_size: 300,
            feature_dim: 32,
            tags_per_image: 10,
            visible_tags: 30,
            latent_dim: 4,
            scene_focus: 3.0,
            noise: 0.0,
            seed: 1,
        }
    }
}

/// Planted parameters, for oracle comparisons.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTruth<T> {
    pub user_ids: Vec<String>,
    pub user_weights: Vec<Vec<T>>,
    pub tag_names: Vec<String>,
    pub tag_latents: Vec<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus<T> {
    pub records: Vec<RawRecord<T>>,
    pub truth: LatentTruth<T>,
}

fn gaussian_vec<T: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Vec<T> {
    (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect()
}

fn unit_vec<T: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Vec<T> {
    let v: Vec<T> = gaussian_vec(rng, n);
    let norm = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Indices of the `k` largest scores, best first; ties by index.
fn top_k<T: Scalar>(scores: &[(usize, T)], k: usize) -> Vec<usize> {
    let mut s = scores.to_vec();
    s.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    s.into_iter().take(k).map(|(i, _)| i).collect()
}

pub fn generate<T: Scalar>(spec: &SynthSpec) -> Result<SynthCorpus<T>> {
    let counts = [
        spec.n_users,
        spec.images_per_user,
        spec.vocab_size,
        spec.feature_dim,
        spec.tags_per_image,
        spec.visible_tags,
        spec.latent_dim,
    ];
    if counts.contains(&0) {
        return Err(Error::invalid("all synthetic counts must be at least 1"));
    }
    if !(spec.noise >= 0.0) || !(spec.scene_focus >= 0.0) {
        return Err(Error::invalid("noise and scene_focus must be non-negative"));
    }
    if spec.tags_per_image > spec.visible_tags || spec.visible_tags > spec.vocab_size {
        return Err(Error::invalid(format!(
            "need tags_per_image ({}) <= visible_tags ({}) <= vocab_size ({})",
            spec.tags_per_image, spec.visible_tags, spec.vocab_size
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tag_latents: Vec<Vec<T>> = (0..spec.vocab_size)
        .map(|_| unit_vec(&mut rng, spec.latent_dim))
        .collect();
    let projection: Vec<Vec<T>> = (0..spec.feature_dim)
        .map(|_| gaussian_vec(&mut rng, spec.latent_dim))
        .collect();
    let user_weights: Vec<Vec<T>> = (0..spec.n_users)
        .map(|_| gaussian_vec(&mut rng, spec.latent_dim))
        .collect();
    let tag_names: Vec<String> = (0..spec.vocab_size).map(|t| format!("tag{t:04}")).collect();
    let user_ids: Vec<String> = (0..spec.n_users).map(|u| format!("user{u:03}")).collect();

    let sigma = T::lit(spec.noise);
    let jitter = T::lit(0.05);
    let mut records = Vec::with_capacity(spec.n_users * spec.images_per_user);
    let focus = T::lit(spec.scene_focus);
    for (u, w) in user_weights.iter().enumerate() {
        let w_norm = dot(w, w).sqrt();
        for i in 0..spec.images_per_user {
            let scene: Vec<T> = gaussian_vec::<T>(&mut rng, spec.latent_dim)
                .into_iter()
                .zip(w)
                .map(|(x, &wi)| x + focus * wi / w_norm)
                .collect();
            let affinity: Vec<(usize, T)> = tag_latents
                .iter()
                .enumerate()
                .map(|(t, l)| (t, dot(&scene, l)))
                .collect();
            let visible = top_k(&affinity, spec.visible_tags);

            let preference: Vec<(usize, T)> = visible
                .iter()
                .map(|&t| {
                    let eps = T::lit(rng.sample::<f64, _>(StandardNormal));
                    (t, dot(w, &tag_latents[t]) + sigma * eps)
                })
                .collect();
            let tags = top_k(&preference, spec.tags_per_image);

            let mut centroid = vec![T::zero(); spec.latent_dim];
            for &t in &visible {
                for (c, &x) in centroid.iter_mut().zip(&tag_latents[t]) {
                    *c += x;
                }
            }
            let denom = T::from_count(visible.len());
            centroid.iter_mut().for_each(|c| *c /= denom);
            let features = projection
                .iter()
                .map(|row| dot(row, &centroid) + jitter * T::lit(rng.sample::<f64, _>(StandardNormal)))
                .collect();

            records.push(RawRecord {
                image_id: format!("img{u:03}_{i:04}"),
                user_id: user_ids[u].clone(),
                tags: tags.into_iter().map(|t| tag_names[t].clone()).collect(),
                features,
            });
        }
    }
    Ok(SynthCorpus {
        records,
        truth: LatentTruth {
            user_ids,
            user_weights,
            tag_names,
            tag_latents,
        },
    })
}

impl<T: Scalar> SynthCorpus<T> {
    pub fn write_records<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = std::io::BufWriter::new(writer);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

impl<T: Scalar> LatentTruth<T> {
    /// Planted score `w*_u · latent(t)`.
    pub fn latent_score(&self, user: usize, tag: usize) -> T {
        dot(&self.user_weights[user], &self.tag_latents[tag])
    }

    /// Rows of `user_id, w_1, ..., w_d`.
    pub fn write_user_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_rows(writer, "user_id", &self.user_ids, &self.user_weights)
    }

    /// Rows of `tag, l_1, ..., l_d`.
    pub fn write_tag_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_rows(writer, "tag", &self.tag_names, &self.tag_latents)
    }
}

fn write_rows<T: Scalar, W: Write>(writer: W, key: &str, names: &[String], rows: &[Vec<T>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let dim = rows.first().map_or(0, Vec::len);
    let mut header = vec![key.to_string()];
    header.extend((1..=dim).map(|i| format!("w{i}")));
    w.write_record(&header)?;
    for (name, row) in names.iter().zip(rows) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(T::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Kendall tau-a between two score vectors over the same items.
pub fn kendall_tau<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let x = (a[i] - a[j]).signum() * (b[i] - b[j]).signum();
            if (a[i] - a[j]) != T::zero() && (b[i] - b[j]) != T::zero() {
                s += if x > T::zero() { 1 } else { -1 };
            }
        }
    }
    s as f64 / (n * (n - 1) / 2) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn small(noise: f64) -> SynthSpec {
        SynthSpec {
            n_users: 3,
            images_per_user: 12,
            vocab_size: 60,
            feature_dim: 6,
            tags_per_image: 6,
            visible_tags: 15,
            latent_dim: 4,
            scene_focus: 1.0,
            noise,
            seed: 3,
        }
    }

    fn inversions(records: &[RawRecord<f64>], user: &str) -> usize {
        let lists: Vec<HashMap<&str, usize>> = records
            .iter()
            .filter(|r| r.user_id == user)
            .map(|r| r.tags.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect())
            .collect();
        let mut count = 0;
        for a in &lists {
            for b in &lists {
                for (x, &ia) in a {
                    for (y, &ja) in a {
                        if let (Some(&ib), Some(&jb)) = (b.get(x), b.get(y)) {
                            if (ia < ja) != (ib < jb) {
                                count += 1;
                            }
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn noiseless_lists_are_consistent() {
        let c = generate::<f64>(&small(0.0)).unwrap();
        assert_eq!(c.records.len(), 36);
        for u in &c.truth.user_ids {
            assert_eq!(inversions(&c.records, u), 0);
        }
        assert!(c.records.iter().all(|r| r.tags.len() == 6 && r.features.len() == 6));
    }

    #[test]
    fn identical_weights_identical_rankings() {
        let c = generate::<f64>(&small(0.0)).unwrap();
        let truth = &c.truth;
        let tags: Vec<usize> = (0..20).collect();
        let mut clone = truth.clone();
        clone.user_weights[1] = truth.user_weights[0].clone();
        let order = |user: usize| {
            let mut t = tags.clone();
            t.sort_by(|&a, &b| clone.latent_score(user, b).partial_cmp(&clone.latent_score(user, a)).unwrap());
            t
        };
        assert_eq!(order(0), order(1));
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate::<f64>(&small(0.3)).unwrap(), generate::<f64>(&small(0.3)).unwrap());
    }

    #[test]
    fn heavy_noise_degrades_consistency() {
        let quiet = generate::<f64>(&small(0.0)).unwrap();
        let loud = generate::<f64>(&SynthSpec { noise: 100.0, ..small(0.0) }).unwrap();
        let q: usize = quiet.truth.user_ids.iter().map(|u| inversions(&quiet.records, u)).sum();
        let l: usize = loud.truth.user_ids.iter().map(|u| inversions(&loud.records, u)).sum();
        assert_eq!(q, 0);
        assert!(l > 0);
    }

    #[test]
    fn isotropic_scenes_stay_consistent() {
        let c = generate::<f64>(&SynthSpec { scene_focus: 0.0, ..small(0.0) }).unwrap();
        for u in &c.truth.user_ids {
            assert_eq!(inversions(&c.records, u), 0);
        }
        let norms: Vec<f64> = c.truth.tag_latents.iter().map(|l| dot(l, l).sqrt()).collect();
        assert!(norms.iter().all(|n| (n - 1.0).abs() < 1e-12));
    }

    #[test]
    fn vocabulary_too_small() {
        let spec = SynthSpec { vocab_size: 10, visible_tags: 12, ..small(0.0) };
        assert!(generate::<f64>(&spec).is_err());
    }

    #[test]
    fn tau_extremes() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
    }
}
