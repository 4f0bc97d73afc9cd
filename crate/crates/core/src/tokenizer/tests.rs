use super::*;

fn grid(h: usize, w: usize, dim: usize, f: impl Fn(usize, usize) -> f64) -> VectorGrid {
    let mut g = VectorGrid::zeros(h, w, dim);
    for s in 0..h * w {
        for d in 0..dim {
            g.vector_mut(s)[d] = f(s, d);
        }
    }
    g
}

#[test]
fn schedule_parses_and_validates() {
    let s = ScaleSchedule::parse("1x1, 2x2,4x4").unwrap();
    assert_eq!(s.len(), 3);
    assert_eq!(s.prefix_sites(2), 5);
    assert_eq!(s.total_sites(), 21);
    assert_eq!(s.to_string(), "1x1,2x2,4x4");
    assert!(ScaleSchedule::parse("2x2,1x1").is_err());
    assert!(ScaleSchedule::parse("").is_err());
    assert!(ScaleSchedule::parse("0x1").is_err());
}

#[test]
fn upsample_replicates_nearest_source() {
    let g = grid(2, 2, 1, |s, _| s as f64);
    let up = upsample(&g, (4, 4)).unwrap();
    assert_eq!(up.vector(0), &[0.0]);
    assert_eq!(up.vector(3), &[1.0]);
    assert_eq!(up.vector(15), &[3.0]);
    assert!(upsample(&up, (2, 2)).is_err());
}

#[test]
fn pooling_inverts_upsampling() {
    let g = grid(2, 3, 2, |s, d| (s * 2 + d) as f64 * 0.25);
    let up = upsample(&g, (4, 6)).unwrap();
    assert_eq!(avg_pool(&up, (2, 3)).unwrap(), g);
}

#[test]
fn dequantize_rejects_out_of_range_ids() {
    let book = Codebook::axis_aligned(1, 2, 0.5).unwrap();
    let map = TokenMap::new(0, 1, 1, vec![9]).unwrap();
    assert!(matches!(dequantize(&map, &book), Err(Error::InvalidToken { id: 9, .. })));
}

#[test]
fn codebook_combinations_reconstruct_exactly() {
    let schedule = ScaleSchedule::parse("1x1,2x2,4x4").unwrap();
    let book = Codebook::axis_aligned(3, 2, 0.25).unwrap();
    let t = Tokenizer::new(schedule.clone(), book, Decoder::Identity).unwrap();
    let maps = vec![
        TokenMap::new(0, 1, 1, vec![1]).unwrap(),
        TokenMap::new(1, 2, 2, vec![0, 2, 3, 4]).unwrap(),
        TokenMap::new(2, 4, 4, (0..16).map(|i| (i % 5) as TokenId).collect()).unwrap(),
    ];
    let image = t.decode_maps(&maps).unwrap();
    let enc = t.encode(&image).unwrap();
    assert!(enc.final_residual.squared_norm() < 1e-20);
    assert_eq!(t.decode_maps(&enc.maps).unwrap(), image);
}

#[test]
fn affine_decoder_round_trips() {
    let d = Decoder::seeded_affine(3, 4);
    let latent = Latent(grid(2, 2, 3, |s, k| (s as f64 - 1.5) * (k as f64 + 1.0) * 0.1));
    let back = d.invert(&d.decode(&latent)).unwrap();
    for (a, b) in back.0.data.iter().zip(&latent.0.data) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn flatten_round_trips() {
    let schedule = ScaleSchedule::parse("1x1,1x2").unwrap();
    let maps = unflatten_prefix(&schedule, &[2, 0, 1]).unwrap();
    assert_eq!(maps.len(), 2);
    assert_eq!(flatten_prefix(&maps), vec![2, 0, 1]);
    assert!(unflatten_prefix(&schedule, &[2, 0]).is_err());
}

#[test]
fn image_writers_emit_every_site() {
    let img = Image(grid(2, 3, 2, |s, d| if d == 0 { s as f64 / 6.0 } else { -0.5 }));
    let ppm = io::to_ppm(&img);
    assert!(ppm.starts_with("P3\n3 2\n255\n"));
    let csv = io::to_csv(&img);
    assert_eq!(csv.lines().count(), 1 + 6);
}
