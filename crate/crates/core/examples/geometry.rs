//! Box IoU, the 27 geometric attributes of a proposal, and greedy NMS.

use ground3d::geometry::{box_corners, box_iou, geometric_attributes, grounding_upper_bound, nms};
use ground3d::AxisAlignedBox;

fn main() -> ground3d::Result<()> {
    let chair = AxisAlignedBox::new([1.0, 2.0, 0.45], [0.55, 0.55, 0.9])?;
    let nudged = chair.translated([0.1, 0.0, 0.0]);
    let far = AxisAlignedBox::new([4.0, 4.0, 0.45], [0.55, 0.55, 0.9])?;
    println!("IoU(chair, chair moved 10 cm) = {:.4}", box_iou(&chair, &nudged));
    println!("IoU(chair, far box)           = {:.4}", box_iou(&chair, &far));

    let attrs = geometric_attributes(&chair);
    println!("center {:?}", &attrs[..3]);
    for (k, c) in box_corners(&chair).iter().enumerate() {
        println!("corner {k}: [{:.3}, {:.3}, {:.3}]", c[0], c[1], c[2]);
    }

    let boxes = [chair, nudged, far, far.translated([0.05, 0.0, 0.0])];
    let scores = [0.9, 0.8, 0.3, 0.6];
    println!("NMS at IoU 0.25 keeps {:?}", nms(&boxes, &scores, 0.25)?);
    println!("best IoU any proposal reaches on the chair: {:.4}", grounding_upper_bound(&boxes[1..], &chair)?);
    Ok(())
}
