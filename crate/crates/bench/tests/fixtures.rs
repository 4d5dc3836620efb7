use latentcast::seqmodels::SeqModelKind;
use latentcast_bench::{frames, predictor_pair};

#[test]
fn latent_windows_cover_a_coarser_grid() {
    let pair = predictor_pair(SeqModelKind::Gru, 8, 4, 1).unwrap();
    let (l, p) = (pair.latent_input.shape(), pair.pixel_input.shape());
    assert_eq!(l[2], p[2]);
    assert_eq!(l[3] * l[4] * 64, p[3] * p[4]);
    assert!(pair.latent.num_params() > 0 && pair.pixel.num_params() > 0);
    let a = pair
        .latent
        .predict_tensor(pair.latent_input.clone())
        .unwrap();
    let b = pair
        .latent
        .predict_tensor(pair.latent_input.clone())
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn frames_are_deterministic_per_seed() {
    assert_eq!(frames(3, 9), frames(3, 9));
    assert_ne!(frames(3, 9), frames(3, 10));
}
