use crate::error::{Error, Result};

/// Frames drawn from each floating-target video by default.
pub const FRAMES_PER_VIDEO: usize = 50;

/// Evenly spaced frame indices `floor(i * frame_count / per_video)` for
/// `i in 0..per_video`, for every video in order.
pub fn sample_eyediap_frames<S: AsRef<str>>(
    video_index: &[(S, usize)],
    per_video: usize,
) -> Result<Vec<(String, usize)>> {
    if per_video == 0 {
        return Err(Error::InvalidValue("per_video must be at least 1".into()));
    }
    let short: Vec<String> = video_index
        .iter()
        .filter(|(_, n)| *n < per_video)
        .map(|(id, n)| format!("{} ({n} frames)", id.as_ref()))
        .collect();
    if !short.is_empty() {
        return Err(Error::InvalidValue(format!(
            "videos with fewer than {per_video} frames: {}",
            short.join(", ")
        )));
    }
    let mut out = Vec::with_capacity(video_index.len() * per_video);
    for (id, count) in video_index {
        for i in 0..per_video {
            // u128 keeps i * count exact for any realistic frame count
            let frame = (i as u128 * *count as u128 / per_video as u128) as usize;
            out.push((id.as_ref().to_string(), frame));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_count_takes_every_frame() {
        let s = sample_eyediap_frames(&[("v", 50)], 50).unwrap();
        assert_eq!(
            s.iter().map(|p| p.1).collect::<Vec<_>>(),
            (0..50).collect::<Vec<_>>()
        );
    }

    #[test]
    fn double_count_strides_by_two() {
        let s = sample_eyediap_frames(&[("v", 100)], 50).unwrap();
        assert_eq!(
            s.iter().map(|p| p.1).collect::<Vec<_>>(),
            (0..100).step_by(2).collect::<Vec<_>>()
        );
    }

    #[test]
    fn thirty_five_videos_give_1750() {
        let index: Vec<(String, usize)> = (0..35).map(|i| (format!("s{i}"), 50 + i * 37)).collect();
        let s = sample_eyediap_frames(&index, FRAMES_PER_VIDEO).unwrap();
        assert_eq!(s.len(), 1750);
    }

    #[test]
    fn short_video_named_in_error() {
        let err = sample_eyediap_frames(&[("ok", 80), ("tiny", 10)], 50).unwrap_err();
        assert!(err.to_string().contains("tiny"));
    }
}
