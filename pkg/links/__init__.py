# links/__init__.py

from typing import Any, Dict, Union

import numpy as np

from links.link_function import LinkFunction, LinkParams, LinkSpec
from links.linear_link import LinearLink
from links.ispline_link import ISplineLink, quantile_knots


class LinkFactory:
    @staticmethod
    def get_link(spec: Union[LinkSpec, Dict[str, Any]], marker: str = 'marker') -> LinkFunction:
        """
        Factory method returning the link implementation for a specification.

        :param spec: LinkSpec or its dictionary form.
        :param marker: Marker name used in error messages.
        :return: Instance of the link function.
        """
        if isinstance(spec, dict):
            spec = LinkSpec(**spec)
        links = {
            'linear': LinearLink,
            'ispline': ISplineLink,
        }
        link_class = links.get(spec.kind.lower())
        if not link_class:
            raise ValueError(f"Link '{spec.kind}' is not supported.")
        return link_class(spec, marker)


def _params(params) -> LinkParams:
    return params if isinstance(params, LinkParams) else LinkParams(np.asarray(params, dtype=float))


def link_transform(spec: LinkSpec, params, y):
    """H(y) for the link described by ``spec``."""
    return LinkFactory.get_link(spec).transform(_params(params), y)


def link_jacobian(spec: LinkSpec, params, y):
    """dH/dy for the link described by ``spec``."""
    return LinkFactory.get_link(spec).jacobian(_params(params), y)


def link_inverse(spec: LinkSpec, params, z):
    """H^{-1}(z) for the link described by ``spec``."""
    return LinkFactory.get_link(spec).inverse(_params(params), z)


__all__ = ['LinkFactory', 'LinkFunction', 'LinkParams', 'LinkSpec', 'LinearLink', 'ISplineLink',
           'quantile_knots', 'link_transform', 'link_jacobian', 'link_inverse']
