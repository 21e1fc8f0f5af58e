use kiprn_web::{bilinear_level, class_count, class_name, kernel_assignment, render_sample};

#[test]
fn samples_are_rgba_and_deterministic() {
    let a = render_sample(4, 3, 48, 9, false).unwrap();
    assert_eq!(a.len(), 48 * 48 * 4);
    assert!(a.chunks(4).all(|px| px[3] == 255));
    assert_eq!(a, render_sample(4, 3, 48, 9, false).unwrap());
    assert_ne!(a, render_sample(4, 3, 48, 9, true).unwrap());
    assert!(render_sample(7, 0, 48, 9, false).is_err());
    assert!(render_sample(0, 0, 0, 9, false).is_err());
}

#[test]
fn levels_have_the_requested_size() {
    for out in [12, 48, 80] {
        assert_eq!(bilinear_level(1, 0, 48, 0, out).unwrap().len(), out * out * 4);
    }
    assert_eq!(bilinear_level(1, 0, 48, 0, 48).unwrap(), render_sample(1, 0, 48, 0, false).unwrap());
}

#[test]
fn kernel_modes() {
    assert_eq!(kernel_assignment(vec![96, 128, 160], "inversed").unwrap(), [7, 5, 3]);
    assert_eq!(kernel_assignment(vec![96, 128, 160], "forward").unwrap(), [3, 5, 7]);
    assert_eq!(kernel_assignment(vec![96, 128], "5").unwrap(), [5, 5]);
    assert!(kernel_assignment(vec![128, 96], "inversed").is_err());
    assert!(kernel_assignment(vec![96], "4").is_err());
    assert_eq!((class_count(), class_name(6).as_str(), class_name(9).as_str()), (7, "repair", ""));
}
