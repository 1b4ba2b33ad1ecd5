use zforce::data::frames::{decode_frames, encode_frames, read_frame_file, write_frame_file, Normalization};
use zforce::data::synthetic::{parity_tokens, sine_mixture, two_mode_hmm, HmmSpec, SineSpec};
use zforce::data::tokens::{parse_sequences, read_vocab_file, write_vocab_file, Vocab};
use zforce::data::{DataKind, Dataset, Observation, Sequences};
use zforce::TrainConfig;

#[test]
fn hmm_transition_frequencies_match_the_chain() {
    let spec = HmmSpec {
        transition: [[0.85, 0.15], [0.3, 0.7]],
        ..HmmSpec::default()
    };
    let (_, states) = two_mode_hmm(&spec, 100, 1001, 3);
    let mut counts = [[0u64; 2]; 2];
    for path in &states {
        for w in path.windows(2) {
            counts[w[0] as usize][w[1] as usize] += 1;
        }
    }
    assert_eq!(counts.iter().flatten().sum::<u64>(), 100_000);
    for i in 0..2 {
        let row = (counts[i][0] + counts[i][1]) as f64;
        for j in 0..2 {
            let f = counts[i][j] as f64 / row;
            assert!((f - spec.transition[i][j]).abs() < 0.01, "P({j}|{i}) = {f}");
        }
    }
}

#[test]
fn hmm_emissions_follow_state() {
    let spec = HmmSpec::default();
    let (ds, states) = two_mode_hmm(&spec, 50, 400, 9);
    let mut ones = [0.0; 2];
    let mut seen = [0.0; 2];
    for (i, path) in states.iter().enumerate() {
        for (o, &s) in ds.observations(i).iter().zip(path) {
            seen[s as usize] += 1.0;
            ones[s as usize] += o.id().unwrap() as f64;
        }
    }
    for s in 0..2 {
        assert!((ones[s] / seen[s] - spec.emission[s]).abs() < 0.01);
    }
}

#[test]
fn parity_suffix_is_fixed_by_the_leading_bit() {
    let (vocab, ds) = parity_tokens(200, 5, 4);
    for i in 0..ds.len() {
        let text = vocab.decode(&ds.observations(i).iter().map(|o| o.id().unwrap()).collect::<Vec<_>>());
        let words: Vec<&str> = text.split_whitespace().collect();
        assert_eq!(words[0], "<s>");
        assert_eq!(*words.last().unwrap(), "</s>");
        let tail = words[words.iter().position(|w| *w == "then").unwrap() + 1..].join(" ");
        match words[1] {
            "zero" => assert_eq!(tail, "x x stop </s>"),
            "one" => assert_eq!(tail, "y y y y stop </s>"),
            other => panic!("unexpected lead {other}"),
        }
    }
}

#[test]
fn sine_data_is_deterministic_and_shaped() {
    let spec = SineSpec::default();
    let (a, lat) = sine_mixture(&spec, 5, 20, 1);
    assert_eq!(a, sine_mixture(&spec, 5, 20, 1).0);
    assert_eq!(a.width(), spec.width);
    assert!((0..5).all(|i| a.seq_len(i) == 20));
    assert!(lat.iter().all(|l| (spec.freq.0..=spec.freq.1).contains(&l.freq)));
}

#[test]
fn frame_file_round_trips() {
    let seqs = vec![vec![0.5f32, -1.0, 2.25, 3.0], vec![], vec![f32::MIN_POSITIVE, 1e30]];
    let bytes = encode_frames(2, &seqs).unwrap();
    assert_eq!(decode_frames(&bytes).unwrap(), (2, seqs.clone()));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.bin");
    let ds = Dataset::frames(2, seqs);
    write_frame_file(&p, &ds).unwrap();
    assert_eq!(read_frame_file(&p).unwrap(), ds);
}

#[test]
fn corrupt_frame_files_are_rejected() {
    let bytes = encode_frames(3, &[vec![1.0; 6]]).unwrap();
    assert!(decode_frames(&bytes[..bytes.len() - 1]).is_err());
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(decode_frames(&longer).is_err());
    assert!(decode_frames(b"nonsense").is_err());
    assert!(encode_frames(3, &[vec![1.0; 5]]).is_err());
}

#[test]
fn normalization_is_fitted_on_the_given_split() {
    let (mut train, _) = sine_mixture(&SineSpec::default(), 20, 30, 2);
    let n = Normalization::fit(&train).unwrap();
    n.apply(&mut train);
    let Sequences::Frames { data, .. } = &train.sequences else { unreachable!() };
    let all: Vec<f64> = data.iter().flatten().map(|&x| x as f64).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / all.len() as f64;
    assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-4);
    let mut frame = data[0][..4].to_vec();
    n.invert(&mut frame);
    let raw = sine_mixture(&SineSpec::default(), 20, 30, 2).0;
    let Sequences::Frames { data: raw, .. } = &raw.sequences else { unreachable!() };
    for (a, b) in frame.iter().zip(&raw[0][..4]) {
        assert!((a - b).abs() < 1e-5);
    }
    assert!(Normalization::fit(&Dataset::frames(2, vec![vec![1.0; 4]])).is_err());
}

#[test]
fn vocabulary_and_sequences_round_trip() {
    let v = Vocab::new(["<s>", "</s>", "good", "bad"].iter().map(|s| s.to_string()).collect()).unwrap();
    let ids = v.encode("<s> good bad </s>").unwrap();
    assert_eq!(ids, vec![0, 2, 3, 1]);
    assert_eq!(v.decode(&ids), "<s> good bad </s>");
    assert!(v.encode("<s> ugly </s>").is_err());
    assert!(Vocab::new(vec!["a".into(), "a".into()]).is_err());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("vocab.txt");
    write_vocab_file(&p, &v).unwrap();
    assert_eq!(read_vocab_file(&p).unwrap().tokens(), v.tokens());
    assert_eq!(parse_sequences("0 2 1\n\n3 3\n", Some(4)).unwrap(), vec![vec![0, 2, 1], vec![], vec![3, 3]]);
    assert!(parse_sequences("0 4\n", Some(4)).is_err());
    assert!(parse_sequences("0 x\n", None).is_err());
}

#[test]
fn truncation_and_batching_preserve_prefixes() {
    let mut ds = Dataset::ids(DataKind::Binary, vec![vec![1, 0, 1, 1, 0], vec![0, 1]]);
    ds.truncate(3);
    assert_eq!(ds.seq_len(0), 3);
    assert_eq!(ds.seq_len(1), 2);
    let b = ds.batch(&[1, 0]);
    assert_eq!(b.lengths, vec![2, 3]);
    assert_eq!(b.ids(0), vec![0, 1]);
    assert_eq!(b.ids(2), vec![0, 1]);
    assert_eq!(b.mask(2), vec![0.0, 1.0]);
    assert_eq!(ds.observations(0)[2], Observation::Id(1));
}

#[test]
fn config_text_round_trips_and_rejects_unknown_keys() {
    let mut c = TrainConfig::default();
    c.set("alpha", "0.5").unwrap();
    c.set("kl_anneal", "off").unwrap();
    c.set("data_kind", "tokens").unwrap();
    let back = TrainConfig::from_text(&c.to_text()).unwrap();
    assert_eq!(back, c);
    assert!(!back.kl_anneal.enabled);
    let err = TrainConfig::from_text("alpah = 1\n").unwrap_err();
    assert!(err.to_string().contains("alpah"));
    assert_eq!(err.exit_code(), 2);
    assert!(TrainConfig::from_text("hidden = many\n").is_err());
}
