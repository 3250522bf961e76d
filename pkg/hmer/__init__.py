# SPDX-FileCopyrightText: 2025 hmer contributors

# SPDX-License-Identifier: Apache-2.0

"""Attention-based handwritten math expression recognition on a small numpy autodiff core."""

__version__ = '0.1.0'
