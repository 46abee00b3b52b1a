use vlashield::orchestrator::Method;
use vlashield_demo::{to_rgba, Demo, Session, SCENES};

#[test]
fn every_listed_scene_loads() {
    for name in SCENES {
        let s = Session::new(name, 0).unwrap();
        assert_eq!(s.frame().dims(), s.scene().dims());
    }
    assert!(Session::new("probe_99", 0).is_err());
    assert!(Session::new("kitchen", 0).is_err());
}

#[test]
fn probe_flags_and_edits_the_standard_scene() {
    let mut s = Session::new("standard", 3).unwrap();
    let out = s.probe(Method::Byovla, 1).unwrap();
    let flagged = out.report.sensitive().count();
    assert!(flagged >= 2 && flagged < out.regions.len());
    let report: serde_json::Value = serde_json::from_str(&s.report_json()).unwrap();
    assert_eq!(report["entries"].as_array().unwrap().len(), s.probe(Method::Byovla, 1).unwrap().regions.len());
    assert_ne!(s.edited(), *s.frame());
    let overlay = s.sensitivity_overlay();
    assert_eq!(overlay.dims(), s.frame().dims());
    assert_ne!(overlay, *s.frame());
}

#[test]
fn gradcam_mask_grows_with_the_fraction() {
    let s = Session::new("standard", 0).unwrap();
    let small = s.gradcam_mask(0.1).unwrap();
    let large = s.gradcam_mask(0.5).unwrap();
    assert!(small.is_subset_of(&large));
    assert!(small.count() < large.count());
    assert!(s.gradcam_mask(1.5).is_err());
}

#[test]
fn perturbation_preview_stays_inside_the_region() {
    let s = Session::new("standard", 0).unwrap();
    let truth = s.scene().truth_regions();
    for (i, r) in truth.iter().enumerate() {
        let img = s.perturb_preview(i, 25, 0.27, 4).unwrap();
        assert!(s.frame().diff_indices(&img).into_iter().all(|p| r.mask.get_index(p)));
    }
    assert!(s.perturb_preview(truth.len(), 25, 0.27, 4).is_err());
    assert!(s.perturb_preview(0, 24, 0.27, 4).is_err());
}

#[test]
fn wasm_wrapper_returns_rgba() {
    let mut d = Demo::new("probe_01", 2).unwrap_or_else(|_| panic!("scene loads"));
    assert_eq!(d.frame().len(), (d.width() * d.height() * 4) as usize);
    let report = d.probe("byovla", 0).unwrap_or_else(|_| panic!("probe runs"));
    assert!(report.contains("\"entries\""));
    assert_eq!(d.edited().len(), d.frame().len());
    let s = Session::new("probe_01", 2).unwrap();
    assert_eq!(d.frame(), to_rgba(s.frame()));
}
