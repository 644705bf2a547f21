//! With noise switched off, every modality is an exact linear image of the
//! video's latent. A least-squares decoder recovers the latents, so matching
//! by decoded latent retrieves every caption's video at rank 1.

use colexp::dataio::manifest::Split;
use colexp::dataio::synth::{generate, SplitSizes, SyntheticExpert, SyntheticSpec};
use colexp::metrics::{evaluate, Pairing};
use colexp::tensor::Tensor;
use nalgebra::{DMatrix, DVector};

fn to_na(t: &Tensor<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn decode(map: &DMatrix<f64>, rows: &Tensor<f64>) -> DVector<f64> {
    let mean = to_na(rows).row_mean().transpose();
    map.clone().svd(true, true).solve(&mean, 1e-12).unwrap()
}

#[test]
fn noiseless_latents_are_recovered_and_retrieved() {
    let spec = SyntheticSpec {
        seed: 21,
        videos: SplitSizes {
            train: 0,
            val: 0,
            test: 40,
        },
        captions_per_video: 2,
        latent_dim: 6,
        word_dim: 12,
        noise: 0.0,
        experts: vec![SyntheticExpert::new("a", 10, 0.6), SyntheticExpert::new("b", 8, 0.6)],
        ..SyntheticSpec::default()
    };
    let data = generate(&spec).unwrap();
    let maps: Vec<DMatrix<f64>> = data.expert_maps.iter().map(to_na).collect();
    let cmap = to_na(&data.caption_map);

    let mut video_latents = Vec::new();
    let mut caption_latents = Vec::new();
    let mut owner = Vec::new();
    for (i, v) in data.videos.iter().enumerate() {
        let truth = DVector::from_column_slice(&v.latent);
        let (e, seq) = spec
            .experts
            .iter()
            .enumerate()
            .find_map(|(e, x)| v.record.expert(&x.name).map(|s| (e, s)))
            .unwrap();
        let z = decode(&maps[e], seq);
        // single-precision storage bounds the recovery error
        assert!((&z - &truth).norm() < 1e-5 * truth.norm().max(1.0));
        video_latents.push(z);
        for c in &v.record.captions {
            caption_latents.push(decode(&cmap, c));
            owner.push(i);
        }
    }

    let nv = video_latents.len();
    let nt = caption_latents.len();
    let scores: Vec<f64> = video_latents
        .iter()
        .flat_map(|v| caption_latents.iter().map(move |c| -(v - c).norm()))
        .collect();
    let s = Tensor::matrix(nv, nt, scores).unwrap();
    let pairing = Pairing::new(owner, nv).unwrap();
    let (t2v, v2t) = evaluate(&s, &pairing, &[1]).unwrap();
    assert_eq!(t2v.recall_at(1), Some(1.0));
    assert_eq!(v2t.recall_at(1), Some(1.0));
    assert_eq!(data.split(Split::Test).len(), 40);
}
