import unittest

from hrn_physics.utils import derive_seeds, detect_indentation, show_diff_and_confirm


class TestUtils(unittest.TestCase):
    def test_detect_indentation_spaces(self):
        content = '{\n    "seed": 1\n}'
        self.assertEqual(detect_indentation(content), 4)

    def test_detect_indentation_tabs(self):
        content = '{\n\t"seed": 1\n}'
        self.assertEqual(detect_indentation(content), 1)

    def test_detect_indentation_default(self):
        content = '{\n"seed": 1\n}'
        self.assertEqual(detect_indentation(content), 2)

    def test_show_diff_and_confirm_unchanged(self):
        lines = []
        result = show_diff_and_confirm(
            "same",
            "same",
            "run.json5",
            input_fn=lambda _: "y",
            print_fn=lambda *a, **k: lines.append(a),
        )
        self.assertEqual(result, "unchanged")
        self.assertEqual(lines, [("No changes detected.",)])

    def test_show_diff_and_confirm_apply(self):
        printed = []
        result = show_diff_and_confirm(
            '{\n  "seed": 0\n}\n',
            '{\n  "seed": 1\n}\n',
            "run.json5",
            input_fn=lambda _: "Yes",
            print_fn=lambda *a, **k: printed.append("".join(map(str, a))),
        )
        self.assertEqual(result, "apply")
        text = "".join(printed)
        self.assertIn('-  "seed": 0', text)
        self.assertIn('+  "seed": 1', text)

    def test_show_diff_and_confirm_cancel(self):
        result = show_diff_and_confirm(
            "a\n", "b\n", "run.json5", input_fn=lambda _: "", print_fn=lambda *a, **k: None
        )
        self.assertEqual(result, "cancel")

    def test_derive_seeds(self):
        self.assertEqual(derive_seeds(7, 3), [7, 8, 9])
        self.assertEqual(derive_seeds(0, 0), [])
        with self.assertRaises(ValueError):
            derive_seeds(0, -1)


if __name__ == "__main__":
    unittest.main()
