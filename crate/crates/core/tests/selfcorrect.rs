use jrm::rng::SeedStream;
use jrm::selfcorrect::{apply_correction, parse_explanation};
use jrm::synthworld::*;

/// Every result an imperfect editor produces can be read back from
/// its own explanation and repaired to a perfect instruction score.
#[test]
fn oracle_explanations_repair_sampled_results() {
    let world = WorldConfig::default();
    let vocabs = Vocabs::new(world.n_regions);
    let mut rng = SeedStream::new(99);
    let quality = EditorQuality {
        p_exec: 0.4,
        p_wrong: 0.3,
        p_overedit: 0.15,
        artifact_mean: 0.3,
    };
    let mut repaired = 0;
    for _ in 0..500 {
        let scene = gen_scene(&mut rng, &world);
        let instr = gen_instruction(&mut rng, &scene, &world, Split::Eval);
        let result = apply_editor(&scene, &instr, &quality, 0.2, &mut rng);
        let tokens = verbalize(&result, &vocabs);
        let h = parse_explanation(&tokens, &vocabs).unwrap();
        assert_eq!(h.warnings, 0, "{:?}", vocabs.expl_strings(&tokens));
        assert!(h.matches(&DefectRecord::of(&result)));
        let fixed = apply_correction(&result, &h, &instr);
        let (before, after) = (score_ground_truth(&result), score_ground_truth(&fixed));
        assert_eq!(after.instruction, 4);
        assert!(after.visual >= before.visual);
        assert!(fixed.is_consistent_with(&scene));
        repaired += (before.instruction < 4) as usize;
    }
    assert!(repaired > 100, "{repaired}");
}
